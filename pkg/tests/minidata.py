"""Tiny desk fixtures shared across test modules: one- and two-camera
frames, a list-backed dataset, and small scene records."""

import numpy as np

from prior3d.dataset import SceneRecord
from prior3d.detector import DecoderConfig, FrameInputs
from prior3d.geometry import Box2D, Cuboid, camera_looking, project_point
from prior3d.scene import LidarScan, RenderedView, Scene


def tiny_config(**kw):
    base = dict(d=8, heads=2, blocks=2, vanilla_queries=2, feat_channels=4,
                bb_channels=(2, 3, 3), n_cameras=1, n_pos_freqs=2, ffn_dim=16)
    base.update(kw)
    return DecoderConfig(**base)


def tiny_camera(width=16, height=16):
    return camera_looking((0.0, 0.0, 1.6), (1.0, 0.0, 0.0), fx=8.0, fy=8.0,
                          cx=width / 2, cy=height / 2, width=width, height=height)


def tiny_frame(seed=0, with_box=True, n_cameras=1, width=16, height=16):
    rng = np.random.default_rng(seed)
    cams = [tiny_camera(width, height)]
    if n_cameras == 2:
        cams.append(camera_looking((0.0, 0.0, 1.6), (-1.0, 0.0, 0.0), fx=8.0, fy=8.0,
                                   cx=width / 2, cy=height / 2, width=width, height=height))
    gt = Cuboid([6.0, 0.4, 0.9], [1.6, 1.2, 1.8], 0.3, "VEHICLE")
    images = rng.uniform(0.0, 1.0, size=(n_cameras, height, width, 3))
    semantics = np.zeros((n_cameras, height, width, 3))
    semantics[0, 5:11, 5:11, 0] = 1.0
    depths = np.clip(rng.uniform(0.05, 0.3, size=(n_cameras, height, width)), 0, 1)
    boxes = [[] for _ in range(n_cameras)]
    if with_box:
        u, v, _, valid = project_point(cams[0], gt.center)
        assert valid
        boxes[0] = [Box2D(u, v, 5.0, 6.0, "VEHICLE", 0.9)]
    return FrameInputs(images=images, semantics=semantics, depths=depths, boxes=boxes,
                       cameras=cams, lidar_points=None, gt_cuboids=[gt], frame_id="tiny")


class ListDataset:
    def __init__(self, records):
        self.records = {r.scene_id: r for r in records}

    def scene_ids(self, split):
        return sorted(self.records)

    def load(self, sid):
        return self.records[sid]


def tiny_records(n=2):
    records = []
    for i in range(n):
        frame = tiny_frame(seed=i)
        scene = Scene(cuboids=frame.gt_cuboids, cameras=frame.cameras)
        views = [RenderedView(image=frame.images[0].astype(np.float32),
                              semantic=frame.semantics[0].astype(np.float32),
                              depth=frame.depths[0].astype(np.float32),
                              boxes=frame.boxes[0], gt_boxes=frame.boxes[0])]
        lidar = LidarScan(points=np.zeros((0, 3)), sources=np.zeros(0, dtype=np.int64))
        records.append(SceneRecord(f"s{i}", scene, views, lidar))
    return records
