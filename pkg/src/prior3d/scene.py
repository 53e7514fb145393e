"""Procedural multi-camera cuboid world.

Generates scenes of vehicle- and human-sized cuboids around a six-camera
rig, rasterizes toy shaded views with per-pixel semantic and depth maps,
corrupts the 2D priors with controllable noise, and casts a simulated
lidar. Everything is a pure function of (config, seed).
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .geometry import (
    Box2D, Camera, Cuboid, camera_looking, cuboid_corners, bev_iou,
    project_cuboid_to_box2d,
)

CLASSES = ("VEHICLE", "HUMAN")
SEMANTIC_CHANNELS = ("VEHICLE", "HUMAN", "BACKGROUND")  # C = 3
DEPTH_MAX = 50.0  # meters; depth maps are metric depth / DEPTH_MAX in [0, 1]

_SUN = np.array([0.3, 0.5, -0.8]) / np.linalg.norm([0.3, 0.5, -0.8])
_SKY = np.array([0.55, 0.65, 0.85])
_GROUND = np.array([0.32, 0.30, 0.27])


@dataclass
class SceneConfig:
    n_vehicles: tuple = (2, 5)          # inclusive count range
    n_humans: tuple = (1, 4)
    vehicle_lwh: tuple = ((3.5, 5.5), (1.6, 2.2), (1.4, 2.0))
    human_lwh: tuple = ((0.4, 0.8), (0.4, 0.8), (1.5, 1.9))
    min_radius: float = 6.0             # keeps objects clear of the rig
    max_radius: float = 45.0
    min_separation: float = 0.5         # gap between footprint circumcircles
    n_cameras: int = 6
    image_width: int = 160
    image_height: int = 96
    hfov_deg: float = 90.0
    camera_ring_radius: float = 0.8
    camera_height: float = 1.6
    lidar_height: float = 1.8

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        def tup(x):
            return tuple(tuple(v) if isinstance(v, list) else v for v in x) if isinstance(x, list) else x
        return cls(**{k: tup(v) for k, v in d.items()})


@dataclass
class PriorNoiseConfig:
    center_sigma_px: float = 0.0
    size_sigma_rel: float = 0.0
    score_beta: tuple = None           # (a, b) for true-box scores; None keeps 1.0
    false_negative_prob: float = 0.0
    false_positive_rate: float = 0.0   # expected spurious boxes per view
    fp_score_beta: tuple = (2.0, 6.0)
    map_blur_sigma: float = 0.0        # pixels, on semantic and depth maps
    map_noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.false_negative_prob <= 1.0:
            raise ValueError("false_negative_prob must lie in [0, 1]")
        for name in ("center_sigma_px", "size_sigma_rel", "false_positive_rate",
                     "map_blur_sigma", "map_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("score_beta", "fp_score_beta"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Scene:
    cuboids: list
    cameras: list
    placement_complete: bool = True


@dataclass
class RenderedView:
    image: np.ndarray      # H x W x 3 float32
    semantic: np.ndarray   # H x W x C float32, scores in [0, 1]
    depth: np.ndarray      # H x W float32 in [0, 1]
    boxes: list            # prior Box2D list (noisy after corrupt_priors)
    gt_boxes: list         # one per visible cuboid, untouched by corruption


@dataclass
class LidarScan:
    points: np.ndarray     # N x 3 world meters
    sources: np.ndarray    # N, 0 = ground, 1 = object surface


def build_rig(config):
    fx = (config.image_width / 2.0) / math.tan(math.radians(config.hfov_deg) / 2.0)
    cams = []
    for i in range(config.n_cameras):
        az = 2.0 * math.pi * i / config.n_cameras
        fwd = np.array([math.cos(az), math.sin(az), 0.0])
        pos = config.camera_ring_radius * fwd + np.array([0.0, 0.0, config.camera_height])
        cams.append(camera_looking(pos, fwd, fx=fx, fy=fx,
                                   cx=config.image_width / 2.0, cy=config.image_height / 2.0,
                                   width=config.image_width, height=config.image_height))
    return cams


def _footprint_radius(extents):
    return math.hypot(extents[0], extents[1]) / 2.0


def generate_scene(config, seed):
    """Deterministic scene for (config, seed): non-overlapping cuboids on the
    ground plane around the camera rig. If placement cannot satisfy the
    separation constraint after bounded retries the scene is flagged
    partial and returned with fewer objects."""
    rng = np.random.default_rng(seed)
    counts = {
        "VEHICLE": int(rng.integers(config.n_vehicles[0], config.n_vehicles[1] + 1)),
        "HUMAN": int(rng.integers(config.n_humans[0], config.n_humans[1] + 1)),
    }
    ranges = {"VEHICLE": config.vehicle_lwh, "HUMAN": config.human_lwh}
    cuboids = []
    complete = True
    for label in CLASSES:
        for _ in range(counts[label]):
            lwh = ranges[label]
            ext = np.array([rng.uniform(*lwh[0]), rng.uniform(*lwh[1]), rng.uniform(*lwh[2])])
            placed = False
            for _ in range(200):
                r = rng.uniform(config.min_radius, config.max_radius)
                az = rng.uniform(0.0, 2.0 * math.pi)
                yaw = rng.uniform(-math.pi, math.pi)
                center = np.array([r * math.cos(az), r * math.sin(az), ext[2] / 2.0])
                cand = Cuboid(center, ext, yaw, label)
                ok = True
                for other in cuboids:
                    gap = (np.hypot(*(center[:2] - other.center[:2]))
                           - _footprint_radius(ext) - _footprint_radius(other.extents))
                    if gap < config.min_separation:
                        ok = False
                        break
                if ok:
                    cuboids.append(cand)
                    placed = True
                    break
            if not placed:
                complete = False
    return Scene(cuboids=cuboids, cameras=build_rig(config), placement_complete=complete)


def _pixel_dirs_cam(camera):
    """Camera-frame direction for every pixel center, [H, W, 3] with z = 1."""
    u = np.arange(camera.width, dtype=np.float64)
    v = np.arange(camera.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy,
                     np.ones_like(uu)], axis=-1)


_FACE_QUADS = (  # corner indices per cuboid face, from cuboid_corners ordering
    (0, 1, 3, 2), (4, 5, 7, 6), (0, 1, 5, 4), (2, 3, 7, 6), (0, 2, 6, 4), (1, 3, 7, 5),
)


def render_view(scene, camera, albedos=None):
    """Z-buffered rasterization of cuboid faces into a toy shaded image plus
    exact semantic / depth maps and ground-truth 2D boxes."""
    w, h = camera.width, camera.height
    dirs_cam = _pixel_dirs_cam(camera)
    dirs_world = dirs_cam @ camera.rotation  # (R^T d), row-vector convention
    cam_center = camera.center

    zbuf = np.full((h, w), np.inf)
    obj_id = np.full((h, w), -1, dtype=np.int64)
    shade = np.zeros((h, w))

    for idx, cub in enumerate(scene.cuboids):
        corners = cuboid_corners(cub)
        corners_cam = corners @ camera.rotation.T + camera.translation
        for quad in _FACE_QUADS:
            pc = corners_cam[list(quad)]
            if (pc[:, 2] <= 1e-6).any():
                continue  # face partially behind the near plane; skip
            us = camera.fx * pc[:, 0] / pc[:, 2] + camera.cx
            vs = camera.fy * pc[:, 1] / pc[:, 2] + camera.cy
            u0 = max(int(math.floor(us.min())), 0)
            u1 = min(int(math.ceil(us.max())), w - 1)
            v0 = max(int(math.floor(vs.min())), 0)
            v1 = min(int(math.ceil(vs.max())), h - 1)
            if u1 < u0 or v1 < v0:
                continue
            p0 = pc[0]
            e1 = pc[1] - pc[0]
            e2 = pc[3] - pc[0]
            n = np.cross(e1, e2)
            d = dirs_cam[v0:v1 + 1, u0:u1 + 1]
            denom = d @ n
            num = float(n @ p0)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = num / denom
                hit_p = d * t[..., None]
                rel = hit_p - p0
                a = rel @ e1 / float(e1 @ e1)
                b = rel @ e2 / float(e2 @ e2)
            with np.errstate(invalid="ignore"):
                inside = ((t > 1e-6) & (a >= -1e-9) & (a <= 1 + 1e-9)
                          & (b >= -1e-9) & (b <= 1 + 1e-9))
            closer = inside & (t < zbuf[v0:v1 + 1, u0:u1 + 1])
            if not closer.any():
                continue
            sub = (slice(v0, v1 + 1), slice(u0, u1 + 1))
            zbuf[sub] = np.where(closer, t, zbuf[sub])
            obj_id[sub] = np.where(closer, idx, obj_id[sub])
            n_world = camera.rotation.T @ (n / np.linalg.norm(n))
            lambert = abs(float(n_world @ _SUN))  # two-sided: face normals are unoriented
            shade[sub] = np.where(closer, 0.4 + 0.6 * lambert, shade[sub])

    # background: sky above the horizon, ground below
    ground_mask = dirs_world[..., 2] < 0
    elev = np.clip(dirs_world[..., 2] / np.linalg.norm(dirs_world, axis=-1), -1, 1)
    image = np.where(ground_mask[..., None], _GROUND * (0.8 + 0.4 * np.abs(elev))[..., None],
                     _SKY * (0.85 + 0.3 * np.abs(elev))[..., None])
    if albedos is None:
        albedos = default_albedos(len(scene.cuboids))
    hit = obj_id >= 0
    if hit.any():
        colors = albedos[np.clip(obj_id, 0, None)]
        image = np.where(hit[..., None], colors * shade[..., None], image)

    # object-class score channels; the background channel stays zero so an
    # empty scene renders an all-zero semantic map
    semantic = np.zeros((h, w, len(SEMANTIC_CHANNELS)))
    for ci, cls in enumerate(CLASSES):
        ids = [i for i, c in enumerate(scene.cuboids) if c.label == cls]
        if ids:
            semantic[..., ci] = np.isin(obj_id, ids).astype(np.float64)

    depth = np.where(np.isfinite(zbuf), np.clip(zbuf / DEPTH_MAX, 0.0, 1.0), 1.0)

    gt_boxes = []
    for cub in scene.cuboids:
        box = project_cuboid_to_box2d(camera, cub)
        if box is not None:
            gt_boxes.append(box)

    return RenderedView(image=image.astype(np.float32),
                        semantic=semantic.astype(np.float32),
                        depth=depth.astype(np.float32),
                        boxes=list(gt_boxes), gt_boxes=gt_boxes)


def default_albedos(n, seed=123):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.25, 0.95, size=(max(n, 1), 3))


def build_scene_record(scene_cfg, noise_cfg, seed, idx, scene_id):
    """One fully rendered scene, deterministic in (configs, seed, idx)
    regardless of which process builds it."""
    from .dataset import SceneRecord

    scene = generate_scene(scene_cfg, seed=[seed, idx])
    albedos = default_albedos(len(scene.cuboids), seed=[seed, idx, 1])
    views = []
    for ci, cam in enumerate(scene.cameras):
        view = render_view(scene, cam, albedos)
        views.append(corrupt_priors(view, noise_cfg, seed=[seed, idx, 100 + ci]))
    lidar = simulate_lidar(scene, lidar_height=scene_cfg.lidar_height)
    return SceneRecord(scene_id, scene, views, lidar)


def corrupt_priors(view, noise, seed):
    """Apply the 2D-backbone imperfection model; ground truth stays intact.

    A zero/None-everything config returns maps and boxes identical to the
    input (bit for bit).
    """
    rng = np.random.default_rng(seed)
    h, w = view.depth.shape

    boxes = []
    for box in view.gt_boxes:
        if noise.false_negative_prob > 0 and rng.random() < noise.false_negative_prob:
            continue
        cu, cv, bw, bh = box.cu, box.cv, box.w, box.h
        if noise.center_sigma_px > 0:
            cu += rng.normal(0.0, noise.center_sigma_px)
            cv += rng.normal(0.0, noise.center_sigma_px)
        if noise.size_sigma_rel > 0:
            bw = max(bw * (1.0 + rng.normal(0.0, noise.size_sigma_rel)), 1.0)
            bh = max(bh * (1.0 + rng.normal(0.0, noise.size_sigma_rel)), 1.0)
        score = box.score
        if noise.score_beta is not None:
            score = float(np.clip(rng.beta(*noise.score_beta), 1e-4, 1.0))
        boxes.append(Box2D(cu, cv, bw, bh, box.label, score))

    if noise.false_positive_rate > 0:
        for _ in range(rng.poisson(noise.false_positive_rate)):
            bw = float(rng.uniform(4.0, w / 3.0))
            bh = float(rng.uniform(4.0, h / 3.0))
            boxes.append(Box2D(float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1)),
                               bw, bh, CLASSES[int(rng.integers(len(CLASSES)))],
                               float(np.clip(rng.beta(*noise.fp_score_beta), 1e-4, 1.0))))

    semantic = view.semantic
    depth = view.depth
    if noise.map_blur_sigma > 0:
        semantic = np.stack([ndimage.gaussian_filter(semantic[..., c], noise.map_blur_sigma)
                             for c in range(semantic.shape[-1])], axis=-1)
        depth = ndimage.gaussian_filter(depth, noise.map_blur_sigma)
    if noise.map_noise_sigma > 0:
        semantic = semantic + rng.normal(0.0, noise.map_noise_sigma, semantic.shape).astype(np.float32)
        depth = depth + rng.normal(0.0, noise.map_noise_sigma, depth.shape).astype(np.float32)
    if noise.map_blur_sigma > 0 or noise.map_noise_sigma > 0:
        semantic = np.clip(semantic, 0.0, 1.0).astype(np.float32)
        depth = np.clip(depth, 0.0, 1.0).astype(np.float32)

    return RenderedView(image=view.image, semantic=semantic, depth=depth,
                        boxes=boxes, gt_boxes=view.gt_boxes)


def simulate_lidar(scene, n_beams=16, azimuth_steps=480, subsample_rate=1.0,
                   max_range=50.0, lidar_height=1.8):
    """Spin a beam grid from the rig center; first cuboid-face or ground hit
    per ray, uniformly strided down to subsample_rate."""
    if n_beams <= 0 or azimuth_steps <= 0 or subsample_rate <= 0:
        raise ValueError("lidar rates must be positive")
    origin = np.array([0.0, 0.0, lidar_height])
    elev = np.radians(np.linspace(-14.0, 2.0, n_beams))
    azim = np.radians(np.arange(azimuth_steps) * 360.0 / azimuth_steps)
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    dirs = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)],
                    axis=-1).reshape(-1, 3)

    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    src = np.zeros(n, dtype=np.int64)

    dz = dirs[:, 2]
    falling = dz < -1e-12
    t_ground = np.where(falling, -origin[2] / np.where(falling, dz, 1.0), np.inf)
    t_best = np.minimum(t_best, t_ground)

    for cub in scene.cuboids:
        c, s = math.cos(cub.yaw), math.sin(cub.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        o_l = rot.T @ (origin - cub.center)
        d_l = dirs @ rot
        half = cub.extents / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d_l
        t1 = (-half - o_l) * inv
        t2 = (half - o_l) * inv
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        hit = (tnear <= tfar) & (tfar > 0) & (tnear > 1e-6)
        better = hit & (tnear < t_best)
        t_best[better] = tnear[better]
        src[better] = 1

    valid = np.isfinite(t_best) & (t_best <= max_range)
    pts = origin + t_best[valid, None] * dirs[valid]
    src = src[valid]
    if subsample_rate < 1.0:
        stride_idx = np.arange(0, len(pts), 1.0 / subsample_rate).astype(np.int64)
        stride_idx = stride_idx[stride_idx < len(pts)]
        pts = pts[stride_idx]
        src = src[stride_idx]
    return LidarScan(points=pts, sources=src)
