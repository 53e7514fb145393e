"""On-disk dataset: one directory per scene with a JSON manifest plus a
single little-endian f32 blob holding image / semantic / depth / lidar
arrays; a top-level splits.json lists scene ids per split."""

import json
import os

import numpy as np

from .geometry import Box2D, Camera, Cuboid
from .scene import LidarScan, RenderedView, Scene

BLOB_NAME = "arrays.bin"
MANIFEST_NAME = "manifest.json"
SPLITS_NAME = "splits.json"


class SceneRecord:
    """A fully rendered scene: geometry, per-camera views, lidar scan."""

    def __init__(self, scene_id, scene, views, lidar):
        self.scene_id = scene_id
        self.scene = scene
        self.views = views
        self.lidar = lidar


def _write_blob(f, arr, entries, name, offset):
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    f.write(arr32.tobytes())
    entries[name] = {"shape": list(arr32.shape), "offset": offset}
    return offset + arr32.nbytes


def write_scene(record, scene_dir):
    os.makedirs(scene_dir, exist_ok=True)
    entries = {}
    offset = 0
    with open(os.path.join(scene_dir, BLOB_NAME), "wb") as f:
        for i, view in enumerate(record.views):
            offset = _write_blob(f, view.image, entries, f"image_{i}", offset)
            offset = _write_blob(f, view.semantic, entries, f"semantic_{i}", offset)
            offset = _write_blob(f, view.depth, entries, f"depth_{i}", offset)
        lidar = np.concatenate([record.lidar.points,
                                record.lidar.sources[:, None].astype(np.float64)], axis=1)
        offset = _write_blob(f, lidar, entries, "lidar", offset)
    manifest = {
        "scene_id": record.scene_id,
        "placement_complete": record.scene.placement_complete,
        "cameras": [c.to_dict() for c in record.scene.cameras],
        "cuboids": [c.to_dict() for c in record.scene.cuboids],
        "views": [{"boxes": [b.to_dict() for b in v.boxes],
                   "gt_boxes": [b.to_dict() for b in v.gt_boxes]} for v in record.views],
        "blobs": entries,
        "total_bytes": offset,
    }
    with open(os.path.join(scene_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, sort_keys=True)


def read_scene(scene_dir):
    manifest_path = os.path.join(scene_dir, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no scene manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    blob_path = os.path.join(scene_dir, BLOB_NAME)
    blob = open(blob_path, "rb").read()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(f"scene blob {blob_path} is truncated or corrupt: "
                         f"{len(blob)} bytes, manifest expects {manifest['total_bytes']}")

    def load(name):
        meta = manifest["blobs"][name]
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(blob, dtype="<f4", count=count,
                             offset=meta["offset"]).reshape(shape).copy()

    scene = Scene(cuboids=[Cuboid.from_dict(d) for d in manifest["cuboids"]],
                  cameras=[Camera.from_dict(d) for d in manifest["cameras"]],
                  placement_complete=manifest["placement_complete"])
    views = []
    for i, vman in enumerate(manifest["views"]):
        views.append(RenderedView(
            image=load(f"image_{i}"), semantic=load(f"semantic_{i}"), depth=load(f"depth_{i}"),
            boxes=[Box2D.from_dict(d) for d in vman["boxes"]],
            gt_boxes=[Box2D.from_dict(d) for d in vman["gt_boxes"]]))
    lidar_arr = load("lidar")
    lidar = LidarScan(points=lidar_arr[:, :3].astype(np.float64),
                      sources=lidar_arr[:, 3].astype(np.int64))
    return SceneRecord(manifest["scene_id"], scene, views, lidar)


def write_dataset(records, root, splits, meta=None):
    """Write records plus a splits manifest. `splits` maps split name to a
    list of scene ids; ids must be disjoint across splits."""
    seen = set()
    for name, ids in splits.items():
        for sid in ids:
            if sid in seen:
                raise ValueError(f"scene id {sid} appears in more than one split")
            seen.add(sid)
    os.makedirs(root, exist_ok=True)
    for record in records:
        write_scene(record, os.path.join(root, "scenes", record.scene_id))
    with open(os.path.join(root, SPLITS_NAME), "w") as f:
        json.dump({"splits": splits, "meta": meta or {}}, f, indent=1, sort_keys=True)


class Dataset:
    """Lazy reader over a dataset directory."""

    def __init__(self, root):
        self.root = root
        splits_path = os.path.join(root, SPLITS_NAME)
        if not os.path.isfile(splits_path):
            raise FileNotFoundError(f"no dataset at {root} (missing {SPLITS_NAME})")
        with open(splits_path) as f:
            blob = json.load(f)
        self.splits = blob["splits"]
        self.meta = blob.get("meta", {})

    def scene_ids(self, split):
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return list(self.splits[split])

    def load(self, scene_id):
        return read_scene(os.path.join(self.root, "scenes", scene_id))

    def iter_split(self, split):
        for sid in self.scene_ids(split):
            yield self.load(sid)


def read_dataset(root):
    return Dataset(root)
