"""Pinhole cameras, cuboids, ray casting, and rotated BEV IoU.

World frame is right-handed, z-up, in meters; yaw rotates about +z.
Camera frame: x right, y down, z forward (depth is camera-z). All
functions here are pure and safe for parallel use.
"""

import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


def normalize_yaw(yaw):
    """Wrap an angle into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray    # 3x3 world->camera
    translation: np.ndarray  # 3, p_cam = R @ p_world + t
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("camera focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"],
                   np.array(d["rotation"]).reshape(3, 3),
                   np.array(d["translation"]), d["width"], d["height"])


def camera_looking(position, forward, fx, fy, cx, cy, width, height, up=(0.0, 0.0, 1.0)):
    """Build a camera at `position` looking along `forward` (world z-up)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(f, up)
    right = right / np.linalg.norm(right)
    down = np.cross(f, right)
    down = down / np.linalg.norm(down)
    rot = np.stack([right, down, f])
    pos = np.asarray(position, dtype=np.float64)
    return Camera(fx, fy, cx, cy, rot, -rot @ pos, width, height)


@dataclass
class Cuboid:
    center: np.ndarray  # x, y, z in world meters
    extents: np.ndarray  # length (along local x), width, height
    yaw: float
    label: str

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.extents = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if (self.extents <= 0).any():
            raise ValueError("cuboid extents must be positive")
        self.yaw = normalize_yaw(float(self.yaw))

    def to_dict(self):
        return {"center": self.center.tolist(), "extents": self.extents.tolist(),
                "yaw": self.yaw, "label": self.label}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["center"]), np.array(d["extents"]), d["yaw"], d["label"])


@dataclass
class Box2D:
    cu: float
    cv: float
    w: float
    h: float
    label: str
    score: float = 1.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("2D box width and height must be positive")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("2D box score must lie in [0, 1]")

    def to_dict(self):
        return {"cu": self.cu, "cv": self.cv, "w": self.w, "h": self.h,
                "label": self.label, "score": self.score}

    @classmethod
    def from_dict(cls, d):
        return cls(d["cu"], d["cv"], d["w"], d["h"], d["label"], d["score"])


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit vector

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            self.direction = self.direction / n


def project_point(camera, p):
    """Project a world point; returns (u, v, depth, valid).

    valid requires positive camera-z depth and (u, v) inside the image.
    Behind-camera points get u = v = nan.
    """
    pc = camera.rotation @ np.asarray(p, dtype=np.float64) + camera.translation
    z = pc[2]
    if z <= 0.0:
        return math.nan, math.nan, z, False
    u = camera.fx * pc[0] / z + camera.cx
    v = camera.fy * pc[1] / z + camera.cy
    valid = (0.0 <= u < camera.width) and (0.0 <= v < camera.height)
    return u, v, z, valid


def project_points(camera, pts):
    """Vectorized projection of [N, 3] world points -> (u, v, depth, valid) arrays."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    pc = pts @ camera.rotation.T + camera.translation
    z = pc[:, 2]
    front = z > 0.0
    zsafe = np.where(front, z, 1.0)
    u = camera.fx * pc[:, 0] / zsafe + camera.cx
    v = camera.fy * pc[:, 1] / zsafe + camera.cy
    u[~front] = np.nan
    v[~front] = np.nan
    valid = front & (u >= 0.0) & (u < camera.width) & (v >= 0.0) & (v < camera.height)
    return u, v, z, valid


def unproject_pixel(camera, u, v):
    """Back-project a pixel to a world-frame ray from the camera center."""
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d_world = camera.rotation.T @ d_cam
    return Ray(camera.center, d_world / np.linalg.norm(d_world))


def sample_ray(ray, interval=5.0, max_range=50.0):
    """Points at metric distances interval, 2*interval, ... <= max_range
    along the ray. Empty [0, 3] array when max_range < interval."""
    if interval <= 0:
        raise ValueError("sample_ray: interval must be positive")
    n = int(math.floor(max_range / interval + 1e-9))
    if n <= 0:
        return np.zeros((0, 3))
    depths = interval * np.arange(1, n + 1)
    return ray.origin[None, :] + depths[:, None] * ray.direction[None, :]


def cuboid_corners(cuboid):
    """All 8 corners, [8, 3] world coordinates."""
    l, w, h = cuboid.extents
    sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (l / 2)
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (w / 2)
    sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * (h / 2)
    local = np.stack([sx, sy, sz], axis=1)
    c, s = math.cos(cuboid.yaw), math.sin(cuboid.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + cuboid.center


def cuboid_bev_polygon(cuboid):
    """Counter-clockwise footprint rectangle, [4, 2]."""
    l, w = cuboid.extents[0], cuboid.extents[1]
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    c, s = math.cos(cuboid.yaw), math.sin(cuboid.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + cuboid.center[:2]


def polygon_area(poly):
    """Shoelace area; positive for counter-clockwise vertex order."""
    poly = np.asarray(poly)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman: clip `subject` by convex CCW polygon `clip`."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inputs = output
        output = []
        prev = inputs[-1]
        prev_in = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]) >= 0.0
        for cur in inputs:
            cur_in = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                # segment crosses the clip edge: solve for the intersection
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (a[1] - prev[1]) - ey * (a[0] - prev[0])) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return output


def bev_iou(a, b):
    """Intersection-over-union of two cuboid footprints in the BEV plane."""
    pa = cuboid_bev_polygon(a)
    pb = cuboid_bev_polygon(b)
    area_a = polygon_area(pa)
    area_b = polygon_area(pb)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter_poly = clip_polygon(pa, pb)
    inter = abs(polygon_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def project_cuboid_to_box2d(camera, cuboid):
    """Axis-aligned image box around the positive-depth corners, clipped to
    the image; None when the cuboid is entirely behind the camera or its
    box falls outside the frame."""
    corners = cuboid_corners(cuboid)
    pc = corners @ camera.rotation.T + camera.translation
    front = pc[:, 2] > 1e-9
    if not front.any():
        return None
    pcf = pc[front]
    u = camera.fx * pcf[:, 0] / pcf[:, 2] + camera.cx
    v = camera.fy * pcf[:, 1] / pcf[:, 2] + camera.cy
    u0, u1 = max(u.min(), 0.0), min(u.max(), camera.width - 1.0)
    v0, v1 = max(v.min(), 0.0), min(v.max(), camera.height - 1.0)
    if u1 <= u0 or v1 <= v0:
        return None
    return Box2D(cu=(u0 + u1) / 2, cv=(v0 + v1) / 2, w=u1 - u0, h=v1 - v0,
                 label=cuboid.label, score=1.0)


def centroid_distance_bev(a, b):
    """Euclidean distance between the (x, y) centers of two cuboids."""
    d = a.center[:2] - b.center[:2]
    return float(np.hypot(d[0], d[1]))
