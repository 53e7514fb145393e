"""Set-prediction training: assignment costs, focal + L1 losses with
per-block deep supervision, the optimization loop, and the assignment
census probe."""

import csv
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .detector import frame_from_record
from .hungarian import hungarian
from .optim import AdamW
from .scene import CLASSES


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 40
    batch_size: int = 4
    seed: int = 0
    lambda_cls: float = 2.0
    lambda_box: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    eval_every: int = 0  # epochs between val snapshots; 0 disables

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lambda_cls < 0 or self.lambda_box < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def gt_param_matrix(cuboids):
    """[G, 8] rows of (cx, cy, cz, l, w, h, sin yaw, cos yaw)."""
    if not cuboids:
        return np.zeros((0, 8))
    rows = [np.concatenate([c.center, c.extents, [math.sin(c.yaw), math.cos(c.yaw)]])
            for c in cuboids]
    return np.array(rows)


def _pred_param_tensor(output):
    centers = output.ref_points + output.offsets
    return T.concat([centers, output.extents, output.yaw_sincos], axis=1)


def match_cost(output, gts, lambda_cls=2.0, lambda_box=0.25):
    """Query-to-GT cost matrix: class miss plus L1 over decoded parameters."""
    if not gts:
        raise ValueError("match_cost needs at least one ground-truth cuboid")
    probs = 1.0 / (1.0 + np.exp(-output.cls_logits.data.astype(np.float64)))
    cls_idx = np.array([CLASSES.index(c.label) for c in gts])
    cost_cls = 1.0 - probs[:, cls_idx]
    pred8 = _pred_param_tensor(output).data.astype(np.float64)
    gt8 = gt_param_matrix(gts)
    cost_box = np.abs(pred8[:, None, :] - gt8[None, :, :]).sum(axis=-1)
    return lambda_cls * cost_cls + lambda_box * cost_box


@dataclass
class LossBreakdown:
    total: "T.Tensor"
    cls_value: float
    box_value: float
    per_block: list
    final_matches: list  # (query, gt) pairs of the last block


def set_loss(outputs, gts, config):
    """Focal classification over all queries plus L1 regression on matched
    queries, matched independently per block, averaged over blocks."""
    n_blocks = len(outputs)
    for out in outputs:  # a NaN forward aborts the step instead of crashing matching
        if not np.isfinite(out.cls_logits.data).all() or not np.isfinite(out.offsets.data).all():
            return LossBreakdown(total=T.Tensor(math.nan), cls_value=math.nan,
                                 box_value=math.nan, per_block=[], final_matches=[])
    total = None
    cls_total = 0.0
    box_total = 0.0
    per_block = []
    final_matches = []
    gt8 = gt_param_matrix(gts)
    for bi, out in enumerate(outputs):
        nq = out.cls_logits.shape[0]
        ncls = out.cls_logits.shape[1]
        if gts:
            pairs = hungarian(match_cost(out, gts, config.lambda_cls, config.lambda_box))
        else:
            pairs = []
        if bi == n_blocks - 1:
            final_matches = pairs
        n_match = len(pairs)
        norm = max(n_match, 1)

        targets = np.zeros((nq, ncls))
        for qi, gi in pairs:
            targets[qi, CLASSES.index(gts[gi].label)] = 1.0
        x = out.cls_logits
        t = targets
        p = T.sigmoid(x)
        bce = T.softplus(x) - x * t
        pt = p * t + (1.0 - p) * (1.0 - t)
        alpha_t = config.focal_alpha * t + (1.0 - config.focal_alpha) * (1.0 - t)
        focal = T.pow_const(1.0 - pt, config.focal_gamma) * alpha_t * bce
        cls_loss = focal.sum() * (1.0 / norm)

        if n_match:
            q_idx = np.array([qi for qi, _ in pairs])
            g_idx = np.array([gi for _, gi in pairs])
            pred8 = _pred_param_tensor(out)
            diff = T.take_rows(pred8, q_idx) - T.Tensor(gt8[g_idx])
            box_loss = T.absolute(diff).sum() * (1.0 / norm)
        else:
            box_loss = T.Tensor(0.0)

        block_total = cls_loss * config.lambda_cls + box_loss * config.lambda_box
        total = block_total if total is None else total + block_total
        cls_total += float(cls_loss.data)
        box_total += float(box_loss.data)
        per_block.append(float(block_total.data))

    total = total * (1.0 / n_blocks)
    return LossBreakdown(total=total, cls_value=cls_total / n_blocks,
                         box_value=box_total / n_blocks, per_block=per_block,
                         final_matches=final_matches)


def footnote_assignment_probe(model, frame, config=None):
    """Census of positive/negative labels around each ground truth: exactly
    one matched query per GT, the rest of that query's ray labelled
    negative."""
    config = config or TrainConfig()
    outputs, qset = model.forward(frame)
    gts = frame.gt_cuboids
    out = outputs[-1]
    pairs = hungarian(match_cost(out, gts, config.lambda_cls, config.lambda_box)) if gts else []
    matched_queries = {qi for qi, _ in pairs}
    nq = out.cls_logits.shape[0]

    ray_members = {}
    for i, tag in enumerate(qset.provenance):
        if tag[0] == "ray":
            ray_members.setdefault(tag[1], []).append(i)

    per_gt = []
    for qi, gi in sorted(pairs, key=lambda t: t[1]):
        tag = qset.provenance[qi]
        entry = {"gt_index": gi, "matched_query": qi, "matched_count": 1,
                 "ray_id": tag[1] if tag[0] == "ray" else None}
        if tag[0] == "ray":
            members = ray_members[tag[1]]
            matched_on_ray = sum(1 for m in members if m in matched_queries)
            entry["queries_on_ray"] = len(members)
            entry["matched_on_ray"] = matched_on_ray
            entry["negatives_on_ray"] = len(members) - matched_on_ray
        per_gt.append(entry)
    return {
        "per_gt": per_gt,
        "n_queries": nq,
        "n_positive": len(pairs),
        "n_negative": nq - len(pairs),
    }


class LearningCurve:
    COLUMNS = ("epoch", "loss", "loss_cls", "loss_box", "lr",
               "val_ap_vehicle", "val_ap_human")

    def __init__(self, records=None, aborted=False):
        self.records = records or []
        self.aborted = aborted

    def append(self, **kw):
        self.records.append(kw)

    def final_loss(self):
        return self.records[-1]["loss"] if self.records else math.nan

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.COLUMNS)
            for rec in self.records:
                writer.writerow([rec.get(c, "") for c in self.COLUMNS])

    @classmethod
    def from_csv(cls, path):
        curve = cls()
        with open(path) as f:
            reader = csv.DictReader(f)
            for row in reader:
                rec = {}
                for k, v in row.items():
                    if v == "" or v is None:
                        continue
                    rec[k] = float(v) if k != "epoch" else int(float(v))
                curve.records.append(rec)
        return curve


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.parameters().items()}


def _restore(model, snap):
    for k, p in model.parameters().items():
        p.data = snap[k].copy()


def train(dataset, model, config, split="train", limit=None, cache_frames=False,
          val_eval=None, log=None, stop_loss=None):
    """Optimize `model` on a dataset split; deterministic for a fixed seed.

    `val_eval(model) -> {class: ap}` runs every `config.eval_every` epochs
    when provided; the best-val parameter snapshot is restored at the end.
    `stop_loss` ends training early once an epoch's mean loss reaches it.
    Returns (model, LearningCurve). On a NaN loss the last end-of-epoch
    parameters are restored and the curve is marked aborted.
    """
    ids = dataset.scene_ids(split) if hasattr(dataset, "scene_ids") else list(range(len(dataset)))
    loader = dataset.load if hasattr(dataset, "load") else dataset.__getitem__
    if limit is not None:
        ids = ids[:limit]
    if not ids:
        raise ValueError(f"split {split!r} is empty")

    cache = {}

    def get_frame(sid):
        if cache_frames:
            if sid not in cache:
                cache[sid] = frame_from_record(loader(sid))
            return cache[sid]
        return frame_from_record(loader(sid))

    n = len(ids)
    steps_per_epoch = math.ceil(n / config.batch_size)
    opt = AdamW(model.parameters(), total_steps=config.epochs * steps_per_epoch,
                base_lr=config.base_lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    curve = LearningCurve()
    last_good = _snapshot(model)
    best_val = None
    best_snap = None

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_lr = opt.current_lr()
        ep_loss, ep_cls, ep_box = [], [], []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            opt.zero_grad()
            scale = 1.0 / len(batch)
            abort = False
            for k in batch:
                frame = get_frame(ids[k])
                outputs, _ = model.forward(frame)
                breakdown = set_loss(outputs, frame.gt_cuboids, config)
                loss_val = float(breakdown.total.data)
                if math.isnan(loss_val):
                    abort = True
                    break
                (breakdown.total * scale).backward()
                ep_loss.append(loss_val)
                ep_cls.append(breakdown.cls_value)
                ep_box.append(breakdown.box_value)
            if abort or not opt.step():
                _restore(model, last_good)
                curve.aborted = True
                if log:
                    log(f"aborting at epoch {epoch}: non-finite loss or gradient")
                return model, curve
        rec = {"epoch": epoch, "loss": float(np.mean(ep_loss)),
               "loss_cls": float(np.mean(ep_cls)), "loss_box": float(np.mean(ep_box)),
               "lr": epoch_lr}
        if val_eval is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
            aps = val_eval(model)
            rec["val_ap_vehicle"] = aps.get("VEHICLE", math.nan)
            rec["val_ap_human"] = aps.get("HUMAN", math.nan)
            mean_ap = np.nanmean([v for v in aps.values()]) if aps else -1.0
            if best_val is None or mean_ap > best_val:
                best_val = mean_ap
                best_snap = _snapshot(model)
        curve.append(**rec)
        if log:
            log(f"epoch {epoch}: loss {rec['loss']:.4f} (cls {rec['loss_cls']:.4f} "
                f"box {rec['loss_box']:.4f}) lr {rec['lr']:.2e}")
        last_good = _snapshot(model)
        if stop_loss is not None and rec["loss"] <= stop_loss:
            break

    if best_snap is not None:
        _restore(model, best_snap)
    return model, curve
