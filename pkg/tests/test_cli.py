import json
import os
import xml.dom.minidom

import numpy as np
import pytest

from prior3d.cli import main
from prior3d.dataset import read_dataset

SMALL = ["--set", "scene.image_width=64", "--set", "scene.image_height=40",
         "--set", "scene.n_vehicles=[1,2]", "--set", "scene.n_humans=[1,1]"]
TINY_MODEL = ["--set", "model.d=16", "--set", "model.heads=2", "--set", "model.blocks=2",
              "--set", "model.feat_channels=8", "--set", "model.bb_channels=[4,8,8]",
              "--set", "model.vanilla_queries=16", "--set", "model.query_budget=60",
              "--set", "training.epochs=2", "--set", "training.batch_size=2"]


def run(argv):
    return main(argv)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert run(["gen-data", "--out", str(root), "--scenes", "6", "--seed", "3",
                "--quiet"] + SMALL) == 0
    return str(root)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, small_dataset):
    out = tmp_path_factory.mktemp("runs") / "loc"
    assert run(["train", "--data", small_dataset, "--out", str(out), "--priors",
                "feat,loc", "--seed", "1", "--quiet"] + SMALL + TINY_MODEL) == 0
    return str(out)


def _tree_bytes(root):
    blobs = {}
    for dirpath, _, files in os.walk(root):
        for fname in files:
            p = os.path.join(dirpath, fname)
            blobs[os.path.relpath(p, root)] = open(p, "rb").read()
    return blobs


def test_gen_data_deterministic_and_parallel(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out, jobs in ((a, "1"), (b, "2")):
        assert run(["gen-data", "--out", str(out), "--scenes", "4", "--seed", "7",
                    "--jobs", jobs, "--quiet"] + SMALL) == 0
    ta, tb = _tree_bytes(a), _tree_bytes(b)
    assert set(ta) == set(tb)
    for k in ta:
        assert ta[k] == tb[k], k


def test_gen_data_counts_and_disjoint_splits(tmp_path):
    out = tmp_path / "ds10"
    assert run(["gen-data", "--out", str(out), "--scenes", "10", "--seed", "0",
                "--quiet"] + SMALL) == 0
    ds = read_dataset(str(out))
    assert sum(len(v) for v in ds.splits.values()) == 10
    assert len(os.listdir(out / "scenes")) == 10
    all_ids = sum(ds.splits.values(), [])
    assert len(all_ids) == len(set(all_ids))
    assert os.path.isfile(out / "config.json")


def test_gen_data_refuses_nonempty_without_force(tmp_path, capsys):
    out = tmp_path / "ds"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    assert run(["gen-data", "--out", str(out), "--scenes", "3", "--quiet"] + SMALL) == 1
    assert "--force" in capsys.readouterr().err
    assert run(["gen-data", "--out", str(out), "--scenes", "3", "--force",
                "--quiet"] + SMALL) == 0


def test_train_writes_artifacts(trained_run):
    assert os.path.isfile(os.path.join(trained_run, "checkpoint", "manifest.json"))
    assert os.path.isfile(os.path.join(trained_run, "checkpoint", "weights.bin"))
    assert os.path.isfile(os.path.join(trained_run, "learning_curve.csv"))
    assert os.path.isfile(os.path.join(trained_run, "learning_curve.svg"))
    sidecar = json.load(open(os.path.join(trained_run, "config.json")))
    assert sidecar["cli"]["priors"] == "feat,loc"
    assert sidecar["run"]["training"]["epochs"] == 2
    assert sidecar["run"]["model"]["d"] == 16


def test_train_vanilla_has_inert_prior_paths(tmp_path, small_dataset):
    out = tmp_path / "vanilla"
    assert run(["train", "--data", small_dataset, "--out", str(out), "--priors", "none",
                "--seed", "1", "--quiet"] + SMALL + TINY_MODEL) == 0
    manifest = json.load(open(out / "checkpoint" / "manifest.json"))
    cfg = manifest["extra"]["decoder_config"]
    assert not cfg["use_feat_prior"] and not cfg["use_loc_prior"] and not cfg["use_query_prior"]
    # projection convs see only the trunk channels when the feat prior is off
    assert manifest["params"]["backbone.proj0.w"]["shape"][2] == cfg["bb_channels"][1]


def test_train_rejects_bad_prior_combos(tmp_path, small_dataset, capsys):
    out = tmp_path / "bad"
    code = run(["train", "--data", small_dataset, "--out", str(out), "--priors",
                "feat,loc,query", "--loc-source", "lidar", "--quiet"] + SMALL + TINY_MODEL)
    assert code == 1
    assert "2D boxes" in capsys.readouterr().err
    code = run(["train", "--data", small_dataset, "--out", str(out), "--priors",
                "feat,query", "--quiet"] + SMALL + TINY_MODEL)
    assert code == 1


def test_train_overfit_restricts_frames(tmp_path, small_dataset):
    out = tmp_path / "overfit"
    assert run(["train", "--data", small_dataset, "--out", str(out), "--priors", "none",
                "--overfit", "2", "--seed", "1", "--quiet"] + SMALL + TINY_MODEL) == 0
    sidecar = json.load(open(out / "config.json"))
    assert sidecar["cli"]["overfit"] == 2


def test_train_requires_dataset(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("PRIOR3D_DATA", raising=False)
    assert run(["train", "--out", str(tmp_path / "x"), "--quiet"] + TINY_MODEL) == 1
    assert "PRIOR3D_DATA" in capsys.readouterr().err


def test_env_var_supplies_dataset(tmp_path, monkeypatch, small_dataset):
    monkeypatch.setenv("PRIOR3D_DATA", small_dataset)
    out = tmp_path / "envrun"
    assert run(["train", "--out", str(out), "--priors", "none", "--epochs", "1",
                "--quiet"] + SMALL + TINY_MODEL) == 0


def test_eval_writes_report_and_is_deterministic(tmp_path, small_dataset, trained_run):
    out1 = tmp_path / "e1"
    out2 = tmp_path / "e2"
    for out in (out1, out2):
        assert run(["eval", "--checkpoint", trained_run, "--data", small_dataset,
                    "--out", str(out), "--quiet"]) == 0
    r1 = json.load(open(out1 / "report.json"))
    r2 = json.load(open(out2 / "report.json"))
    assert r1 == r2
    assert r1["split"] == "test"  # default split
    assert r1["priors"]["priors"] == "feat,loc"  # echoed from the checkpoint sidecar
    assert (out1 / "pr_curves.csv").is_file()
    assert (out1 / "pr_curves.svg").is_file()


def test_eval_parallel_matches_serial(tmp_path, small_dataset, trained_run):
    serial = tmp_path / "serial"
    par = tmp_path / "par"
    assert run(["eval", "--checkpoint", trained_run, "--data", small_dataset,
                "--out", str(serial), "--split", "train", "--quiet"]) == 0
    assert run(["eval", "--checkpoint", trained_run, "--data", small_dataset,
                "--out", str(par), "--split", "train", "--jobs", "2", "--quiet"]) == 0
    assert json.load(open(serial / "report.json")) == json.load(open(par / "report.json"))


def test_eval_rejects_missing_checkpoint(tmp_path, small_dataset, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path), "--data", small_dataset,
                "--quiet"]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_compare_self_and_formatting(tmp_path, small_dataset, trained_run, capsys):
    out = tmp_path / "er"
    assert run(["eval", "--checkpoint", trained_run, "--data", small_dataset,
                "--out", str(out), "--quiet"]) == 0
    report = str(out / "report.json")
    assert run(["compare", report, report]) == 0
    text = capsys.readouterr().out
    assert "(+0.00)" in text
    assert "VERDICT: FAIL" in text  # equal scores are not a strict ordering


def test_compare_orderings(tmp_path, capsys):
    def fake_report(path, ap_v, ap_h, label):
        rep = {"label": label, "eval_config": {"iou_threshold": 0.1}, "nms": False,
               "ap_bev_iou": {"VEHICLE": ap_v, "HUMAN": ap_h},
               "ap_centroid": {"VEHICLE": ap_v, "HUMAN": ap_h}}
        path.write_text(json.dumps(rep))

    a, b, c = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "c.json"
    fake_report(a, 0.40, 0.05, "vanilla")
    fake_report(b, 0.50, 0.08, "feat")
    fake_report(c, 0.60, 0.11, "feat,loc")
    assert run(["compare", str(a), str(b), str(c)]) == 0
    text = capsys.readouterr().out
    assert "VERDICT: PASS" in text
    assert "(+10.00)" in text and "(+20.00)" in text

    assert run(["compare", str(b), str(a)]) == 0
    assert "VERDICT: FAIL" in capsys.readouterr().out


def test_compare_rejects_mismatched_configs(tmp_path, capsys):
    r1 = {"label": "x", "eval_config": {"iou_threshold": 0.1}, "nms": False,
          "ap_bev_iou": {"VEHICLE": 0.4}, "ap_centroid": {"VEHICLE": 0.5}}
    r2 = dict(r1, eval_config={"iou_threshold": 0.2})
    p1, p2 = tmp_path / "r1.json", tmp_path / "r2.json"
    p1.write_text(json.dumps(r1))
    p2.write_text(json.dumps(r2))
    assert run(["compare", str(p1), str(p2)]) == 1
    assert "eval config" in capsys.readouterr().err


def test_plot_outputs_valid_svg(tmp_path, small_dataset, trained_run):
    ev = tmp_path / "ev"
    assert run(["eval", "--checkpoint", trained_run, "--data", small_dataset,
                "--out", str(ev), "--quiet"]) == 0
    out = tmp_path / "figs"
    assert run(["plot", str(ev / "pr_curves.csv"),
                str(os.path.join(trained_run, "learning_curve.csv")),
                "--out", str(out)]) == 0
    for name in ("pr_curves.svg", "learning_curves.svg"):
        doc = xml.dom.minidom.parse(str(out / name))  # parses as XML
        assert doc.documentElement.tagName == "svg"


def test_plot_two_models_two_series(tmp_path):
    csv_path = tmp_path / "pr.csv"
    rows = ["label,matcher,class,threshold,recall,precision"]
    for label in ("model_a", "model_b"):
        rows += [f"{label},iou,VEHICLE,0.9,0.0,1.0", f"{label},iou,VEHICLE,0.5,1.0,0.5"]
    csv_path.write_text("\n".join(rows) + "\n")
    out = tmp_path / "figs"
    assert run(["plot", str(csv_path), "--out", str(out)]) == 0
    svg = (out / "pr_curves.svg").read_text()
    assert "model_a" in svg and "model_b" in svg


def test_plot_empty_curve_no_crash(tmp_path):
    csv_path = tmp_path / "pr.csv"
    csv_path.write_text("label,matcher,class,threshold,recall,precision\n")
    out = tmp_path / "figs"
    assert run(["plot", str(csv_path), "--kind", "pr", "--out", str(out)]) == 0
    xml.dom.minidom.parse(str(out / "pr_curves.svg"))


def test_plot_rejects_malformed_csv(tmp_path, capsys):
    csv_path = tmp_path / "pr.csv"
    csv_path.write_text("label,matcher,class,threshold,recall,precision\n"
                        "m,iou,VEHICLE,not_a_number,0.5,0.5\n")
    assert run(["plot", str(csv_path), "--out", str(tmp_path / "figs")]) == 1
    assert ":2" in capsys.readouterr().err


def test_plot_deterministic_svg(tmp_path):
    csv_path = tmp_path / "pr.csv"
    csv_path.write_text("label,matcher,class,threshold,recall,precision\n"
                        "m,iou,VEHICLE,0.9,0.0,1.0\nm,iou,VEHICLE,0.5,1.0,0.5\n")
    outs = []
    for sub in ("f1", "f2"):
        out = tmp_path / sub
        assert run(["plot", str(csv_path), "--out", str(out)]) == 0
        outs.append((out / "pr_curves.svg").read_bytes())
    assert outs[0] == outs[1]


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus_section": {}}))
    assert run(["gen-data", "--out", str(tmp_path / "d"), "--scenes", "3",
                "--config", str(cfg), "--quiet"]) == 1
    assert "unknown config section" in capsys.readouterr().err
    cfg.write_text(json.dumps({"training": {"nonexistent_key": 5}}))
    assert run(["gen-data", "--out", str(tmp_path / "d2"), "--scenes", "3",
                "--config", str(cfg), "--quiet"]) == 1
    assert "bad key" in capsys.readouterr().err
