"""Multi-camera cuboid detection transformer.

A small convolutional backbone extracts two feature levels per camera
(optionally concatenated with semantic/depth prior maps). Queries come
from one of three sources: learned per-dataset embeddings, ray-cast
samples along 2D box centroids, or subsampled lidar points. Six decoder
blocks alternate self-attention, local cross-attention at the projected
reference points, and a feed-forward update; a shared head classifies
and regresses cuboid parameters after every block.
"""

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from .geometry import Box2D, Cuboid, sample_ray, unproject_pixel
from .scene import CLASSES

Z_MIN = 0.25  # camera-frame near plane for projection validity
EXTENT_FLOOR = 1e-3


@dataclass
class DecoderConfig:
    d: int = 64
    heads: int = 4
    blocks: int = 6
    vanilla_queries: int = 100
    feat_channels: int = 32
    bb_channels: tuple = (16, 32, 32)
    strides: tuple = (4, 8)
    n_cameras: int = 6
    n_classes: int = 2
    use_feat_prior: bool = False
    use_loc_prior: bool = False
    use_query_prior: bool = False
    loc_source: str = "ray"  # "ray" | "lidar"
    refine_points: bool = True
    box_score_threshold: float = 0.3
    query_budget: int = 600
    ray_interval_m: float = 5.0
    ray_max_range_m: float = 50.0
    n_pos_freqs: int = 6
    ffn_dim: int = 128
    volume_xy_m: float = 50.0
    volume_z: tuple = (-3.0, 5.0)

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("embedding dim must divide evenly over heads")
        if self.blocks < 1:
            raise ValueError("need at least one decoder block")
        if self.loc_source not in ("ray", "lidar"):
            raise ValueError(f"unknown loc_source {self.loc_source!r}")
        if self.use_query_prior and not (self.use_loc_prior and self.loc_source == "ray"):
            raise ValueError("query priors require ray location priors (they read 2D boxes)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("strides", "volume_z", "bb_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class FrameInputs:
    images: np.ndarray        # [n_cam, H, W, 3]
    semantics: np.ndarray     # [n_cam, H, W, C]
    depths: np.ndarray        # [n_cam, H, W]
    boxes: list               # per camera: list of prior Box2D
    cameras: list
    lidar_points: np.ndarray  # [N, 3] or None
    gt_cuboids: list
    frame_id: str = ""


def frame_from_record(record):
    return FrameInputs(
        images=np.stack([v.image for v in record.views]),
        semantics=np.stack([v.semantic for v in record.views]),
        depths=np.stack([v.depth for v in record.views]),
        boxes=[list(v.boxes) for v in record.views],
        cameras=list(record.scene.cameras),
        lidar_points=record.lidar.points if record.lidar is not None else None,
        gt_cuboids=list(record.scene.cuboids),
        frame_id=record.scene_id,
    )


@dataclass
class QuerySet:
    q: "T.Tensor"            # [Q, d]
    ref_points: "T.Tensor"   # [Q, 3]
    provenance: list         # ("vanilla", i) | ("ray", box_idx, depth_idx) | ("lidar", i)
    source: str              # which init produced the set
    fell_back: bool = False  # ray init had zero usable boxes


@dataclass
class BlockOutput:
    cls_logits: "T.Tensor"   # [Q, n_classes]
    offsets: "T.Tensor"      # [Q, 3] meters, relative to ref_points
    extents: "T.Tensor"      # [Q, 3] strictly positive
    yaw_sincos: "T.Tensor"   # [Q, 2]
    ref_points: "T.Tensor"   # [Q, 3] points this block's head saw


@dataclass
class Detection:
    cuboid: Cuboid
    label: str
    score: float
    frame_id: str = ""


def sinusoidal_encoding(points, n_freqs, scale=50.0):
    """[N, 3] -> [N, 3 * 2 * n_freqs] sin/cos features of scaled coordinates."""
    x = np.asarray(points, dtype=np.float64) / scale
    outs = []
    for k in range(n_freqs):
        f = (2.0 ** k) * math.pi
        outs.append(np.sin(f * x))
        outs.append(np.cos(f * x))
    return np.concatenate(outs, axis=1)


def decode_yaw(sincos):
    """Normalize a (sin, cos) pair and extract the yaw angle."""
    s, c = sincos
    n = math.hypot(s, c)
    if n < 1e-12:
        return 0.0
    return math.atan2(s / n, c / n)


def decode_detections(output, frame_id=""):
    """Final-block tensors -> per-query Detection list (numpy side)."""
    logits = output.cls_logits.data
    probs = 1.0 / (1.0 + np.exp(-logits))
    centers = output.ref_points.data + output.offsets.data
    extents = output.extents.data
    sincos = output.yaw_sincos.data
    dets = []
    for i in range(len(probs)):
        ci = int(np.argmax(probs[i]))
        yaw = decode_yaw(sincos[i])
        cub = Cuboid(centers[i].astype(np.float64), extents[i].astype(np.float64), yaw, CLASSES[ci])
        dets.append(Detection(cub, CLASSES[ci], float(probs[i, ci]), frame_id))
    return dets


class Detector:
    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params = {}
        rng = np.random.default_rng(seed)
        c = config

        def lin(name, fan_in, fan_out, w_scale=1.0, b_init=0.0):
            std = w_scale / math.sqrt(fan_in)
            self._add(f"{name}.w", rng.normal(0.0, std, size=(fan_in, fan_out)))
            self._add(f"{name}.b", np.full(fan_out, b_init, dtype=np.float64))

        def conv(name, kh, kw, cin, cout):
            std = math.sqrt(2.0 / (kh * kw * cin))
            self._add(f"{name}.w", rng.normal(0.0, std, size=(kh, kw, cin, cout)))
            self._add(f"{name}.b", np.zeros(cout))

        def lnorm(name, dim):
            self._add(f"{name}.g", np.ones(dim))
            self._add(f"{name}.b", np.zeros(dim))

        f = c.feat_channels
        b1, b2, b3 = c.bb_channels
        conv("backbone.conv1", 3, 3, 3, b1)
        conv("backbone.conv2", 3, 3, b1, b2)
        conv("backbone.conv3", 3, 3, b2, b3)
        prior_ch = (len(CLASSES) + 2) if c.use_feat_prior else 0  # C semantic + 1 depth
        conv("backbone.proj0", 1, 1, b2 + prior_ch, f)
        conv("backbone.proj1", 1, 1, b3 + prior_ch, f)

        self._add("queries.q_pos", rng.normal(0.0, 1.0 / math.sqrt(c.d), size=(c.vanilla_queries, c.d)))
        self._add("queries.q_feat", rng.normal(0.0, 1.0 / math.sqrt(c.d), size=(c.vanilla_queries, c.d)))
        lin("queries.ref_mlp1", c.d, c.d)
        lin("queries.ref_mlp2", c.d, 3, w_scale=3.0)  # wider init spreads initial points
        enc_dim = 3 * 2 * c.n_pos_freqs
        lin("queries.pos_mlp1", enc_dim, c.d)
        lin("queries.pos_mlp2", c.d, c.d)
        qp_in = 2 * f + 1 + c.n_classes + 1 + 4  # pooled feats + depth + one-hot + score + box
        lin("queries.prior_mlp1", qp_in, c.d)
        # small output init: prior features start near zero and grow as learned
        lin("queries.prior_mlp2", c.d, c.d, w_scale=0.3)

        k = c.n_cameras * len(c.strides)
        for b in range(c.blocks):
            for nm in ("wq", "wk", "wv", "wo"):
                lin(f"block{b}.self.{nm}", c.d, c.d)
            lnorm(f"block{b}.ln1", c.d)
            lin(f"block{b}.cross.weights", c.d, k)
            lin(f"block{b}.cross.out", f, c.d)
            lnorm(f"block{b}.ln2", c.d)
            lin(f"block{b}.ffn1", c.d, c.ffn_dim)
            lin(f"block{b}.ffn2", c.ffn_dim, c.d)
            lnorm(f"block{b}.ln3", c.d)

        lin("head.cls1", c.d, c.d)
        lin("head.cls2", c.d, c.n_classes, b_init=-2.0)  # start near-background
        lin("head.reg1", c.d, c.d)
        lin("head.reg2", c.d, 8)
        # extent channels start around softplus(0.5) ~ 1 m
        self.params["head.reg2.b"].data[3:6] = 0.5
        self.params["head.reg2.b"].data[7] = 1.0  # cos-leaning yaw start

    def _add(self, name, arr):
        self.params[name] = T.Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)

    def _p(self, name):
        return self.params[name]

    def _const(self, arr):
        return T.Tensor(np.asarray(arr, dtype=self.dtype))

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def load_state(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing parameter {name}")
            if tuple(arrays[name].shape) != p.shape:
                raise ValueError(f"checkpoint/model config mismatch on {name}: "
                                 f"{arrays[name].shape} vs {p.shape}")
            p.data = arrays[name].astype(self.dtype)
        extra = set(arrays) - set(self.params)
        if extra:
            raise ValueError(f"checkpoint has unexpected parameters: {sorted(extra)[:4]}")

    def _linear(self, x, name):
        return T.matmul(x, self._p(f"{name}.w")) + self._p(f"{name}.b")

    def _mlp(self, x, stem):
        return self._linear(T.relu(self._linear(x, f"{stem}1")), f"{stem}2")

    # ---- backbone ----

    def _validate_frame(self, frame):
        n_cam, h, w = frame.images.shape[0], frame.images.shape[1], frame.images.shape[2]
        if n_cam != self.config.n_cameras:
            raise ValueError(f"frame has {n_cam} cameras, model expects {self.config.n_cameras}")
        s = max(self.config.strides)
        if h % s or w % s:
            raise ValueError(f"image size {w}x{h} must be divisible by stride {s}")
        for img in frame.images[1:]:
            if img.shape != frame.images[0].shape:
                raise ValueError("camera resolutions differ within a frame")

    def _pool_prior_maps(self, frame, ci, stride):
        maps = np.concatenate([frame.semantics[ci], frame.depths[ci][..., None]], axis=-1)
        h, w, ch = maps.shape
        pooled = maps.reshape(h // stride, stride, w // stride, stride, ch).mean(axis=(1, 3))
        return pooled

    def backbone_forward(self, frame):
        """Per camera, per level feature maps: {level: [Tensor[h, w, F], ...]}."""
        feats = {0: [], 1: []}
        for ci in range(self.config.n_cameras):
            x = self._const(frame.images[ci][None])
            h1 = T.relu(T.conv2d(x, self._p("backbone.conv1.w"), self._p("backbone.conv1.b"),
                                 stride=2, padding=1))
            h2 = T.relu(T.conv2d(h1, self._p("backbone.conv2.w"), self._p("backbone.conv2.b"),
                                 stride=2, padding=1))
            h3 = T.relu(T.conv2d(h2, self._p("backbone.conv3.w"), self._p("backbone.conv3.b"),
                                 stride=2, padding=1))
            for li, trunk in enumerate((h2, h3)):
                if self.config.use_feat_prior:
                    pooled = self._pool_prior_maps(frame, ci, self.config.strides[li])
                    trunk = T.concat([trunk, self._const(pooled[None])], axis=3)
                proj = T.conv2d(trunk, self._p(f"backbone.proj{li}.w"),
                                self._p(f"backbone.proj{li}.b"))
                _, fh, fw, fc = proj.shape
                feats[li].append(T.reshape(proj, (fh, fw, fc)))
        return feats

    # ---- query generation ----

    def vanilla_query_init(self):
        """Learned per-dataset queries; reference points via an MLP squashed
        into the scene volume. Frame-independent by construction."""
        q_pos = self._p("queries.q_pos")
        q_feat = self._p("queries.q_feat")
        raw = T.tanh(self._mlp(q_pos, "queries.ref_mlp"))
        cfg = self.config
        zc = (cfg.volume_z[0] + cfg.volume_z[1]) / 2.0
        zh = (cfg.volume_z[1] - cfg.volume_z[0]) / 2.0
        scale = self._const(np.array([cfg.volume_xy_m, cfg.volume_xy_m, zh]))
        shift = self._const(np.array([0.0, 0.0, zc]))
        p = raw * scale + shift
        prov = [("vanilla", i) for i in range(cfg.vanilla_queries)]
        return QuerySet(q=q_pos + q_feat, ref_points=p, provenance=prov, source="vanilla")

    def _pos_embed(self, points):
        enc = self._const(sinusoidal_encoding(points, self.config.n_pos_freqs,
                                              scale=self.config.volume_xy_m))
        return self._mlp(enc, "queries.pos_mlp")

    def ray_query_init(self, frame, feats=None):
        """Reference points sampled at uniform metric intervals along the
        back-projected rays through kept 2D box centroids; lowest-score
        boxes are dropped first when the budget binds."""
        cfg = self.config
        cand = [(ci, box) for ci, blist in enumerate(frame.boxes) for box in blist
                if box.score >= cfg.box_score_threshold]
        if not cand:
            qs = self.vanilla_query_init()
            qs.fell_back = True
            return qs
        cand.sort(key=lambda t: -t[1].score)
        n_per_ray = int(math.floor(cfg.ray_max_range_m / cfg.ray_interval_m + 1e-9))
        cand = cand[:max(cfg.query_budget // max(n_per_ray, 1), 1)]

        pts = []
        prov = []
        box_of_query = []
        for bi, (ci, box) in enumerate(cand):
            ray = unproject_pixel(frame.cameras[ci], box.cu, box.cv)
            samples = sample_ray(ray, cfg.ray_interval_m, cfg.ray_max_range_m)
            for di, s in enumerate(samples):
                pts.append(s)
                prov.append(("ray", bi, di))
                box_of_query.append(bi)
        ref = np.array(pts)
        q_pos = self._pos_embed(ref)
        if cfg.use_query_prior:
            if feats is None:
                raise ValueError("query priors need backbone features")
            vecs = []
            for ci, box in cand:
                vecs.append(self.query_prior_features(
                    box, frame.semantics[ci], frame.depths[ci],
                    [feats[li][ci] for li in range(len(cfg.strides))]))
            prior_mat = T.stack(vecs, axis=0)
            q_feat = T.take_rows(prior_mat, np.array(box_of_query))
            q = q_pos + q_feat
        else:
            q = q_pos
        return QuerySet(q=q, ref_points=self._const(ref), provenance=prov, source="ray")

    def lidar_query_init(self, frame):
        """Uniformly subsampled lidar points as reference points; feature
        part left at zero so only location information enters."""
        pts = frame.lidar_points
        if pts is None or len(pts) == 0:
            raise ValueError("lidar query init needs a non-empty scan")
        budget = self.config.query_budget
        if len(pts) > budget:
            step = int(math.ceil(len(pts) / budget))
            pts = pts[::step]
        q_pos = self._pos_embed(pts)
        prov = [("lidar", i) for i in range(len(pts))]
        return QuerySet(q=q_pos, ref_points=self._const(np.asarray(pts)), provenance=prov,
                        source="lidar")

    def query_prior_vector(self, box, semantic, depth, level_feats):
        """Pooled object-level vector for one 2D box, before the MLP.

        Crops the depth map and each feature level to the box, weights the
        crops pixel-wise by the semantic channel of the predicted class,
        average-pools each weighted crop, then appends one-hot class,
        objectness score, and normalized box parameters.
        """
        cfg = self.config
        h, w = depth.shape
        cls_idx = CLASSES.index(box.label)
        u0, u1 = _crop_bounds(box.cu, box.w, w)
        v0, v1 = _crop_bounds(box.cv, box.h, h)
        weight = semantic[v0:v1, u0:u1, cls_idx]
        d_pooled = float((depth[v0:v1, u0:u1] * weight).mean())
        parts = [self._const(np.array([d_pooled]))]
        for li, fmap in enumerate(level_feats):
            s = cfg.strides[li]
            fh, fw = fmap.shape[0], fmap.shape[1]
            fu0, fu1 = _scale_bounds(u0, u1, s, fw)
            fv0, fv1 = _scale_bounds(v0, v1, s, fh)
            crop = T.slice_tensor(fmap, (slice(fv0, fv1), slice(fu0, fu1), slice(None)))
            pooled_sem = semantic[..., cls_idx].reshape(h // s, s, w // s, s).mean(axis=(1, 3))
            wmap = pooled_sem[fv0:fv1, fu0:fu1]
            weighted = crop * self._const(wmap[..., None])
            parts.append(T.global_avg_pool(weighted))
        onehot = np.zeros(cfg.n_classes)
        onehot[cls_idx] = 1.0
        extras = np.concatenate([onehot, [box.score],
                                 [box.cu / w, box.cv / h, box.w / w, box.h / h]])
        parts.append(self._const(extras))
        return T.concat(parts, axis=0)

    def query_prior_features(self, box, semantic, depth, level_feats):
        """Pooled prior vector pushed through the embedding MLP, [d]."""
        vec = self.query_prior_vector(box, semantic, depth, level_feats)
        return self._mlp(T.reshape(vec, (1, -1)), "queries.prior_mlp").reshape(self.config.d)

    def build_queries(self, frame, feats):
        cfg = self.config
        if not cfg.use_loc_prior:
            return self.vanilla_query_init()
        if cfg.loc_source == "lidar":
            return self.lidar_query_init(frame)
        return self.ray_query_init(frame, feats)

    # ---- decoder blocks ----

    def _self_attention(self, q, b):
        cfg = self.config
        n = q.shape[0]
        dh = cfg.d // cfg.heads
        qq = self._linear(q, f"block{b}.self.wq")
        kk = self._linear(q, f"block{b}.self.wk")
        vv = self._linear(q, f"block{b}.self.wv")

        def split(t):
            return T.transpose(T.reshape(t, (n, cfg.heads, dh)), (1, 0, 2))

        qh, kh, vh = split(qq), split(kk), split(vv)
        att = T.softmax(T.matmul(qh, T.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dh)), axis=-1)
        out = T.reshape(T.transpose(T.matmul(att, vh), (1, 0, 2)), (n, cfg.d))
        out = self._linear(out, f"block{b}.self.wo")
        return T.layer_norm(q + out, self._p(f"block{b}.ln1.g"), self._p(f"block{b}.ln1.b"))

    def _project_queries(self, p, cam):
        """Differentiable pinhole projection of [Q, 3] points into one camera.
        Returns (u, v) [Q, 1] tensors and a constant front-of-camera mask."""
        pc = T.matmul(p, self._const(cam.rotation.T)) + self._const(cam.translation)
        x = T.slice_tensor(pc, (slice(None), slice(0, 1)))
        y = T.slice_tensor(pc, (slice(None), slice(1, 2)))
        z = T.slice_tensor(pc, (slice(None), slice(2, 3)))
        front = pc.data[:, 2] > Z_MIN
        z_safe = T.where(front[:, None], z, self._const(1.0))
        u = x * cam.fx / z_safe + cam.cx
        v = y * cam.fy / z_safe + cam.cy
        return u, v, front

    def gather_point_features(self, q, p, feats, frame, b):
        """Project reference points into every camera, bilinear-sample each
        level, and average with masked softmax weights over the valid
        samples only. Returns the [Q, F] aggregate and the per-query
        any-camera-valid mask."""
        cfg = self.config
        samples = []
        valids = []
        for ci, cam in enumerate(frame.cameras):
            u, v, front = self._project_queries(p, cam)
            for li, stride in enumerate(cfg.strides):
                shift = 0.5 - stride / 2.0
                uf = (u + shift) * (1.0 / stride)
                vf = (v + shift) * (1.0 / stride)
                sampled, ok = T.bilinear_sample(feats[li][ci], T.concat([uf, vf], axis=1))
                samples.append(sampled)
                valids.append(ok & front)
        vmask = np.stack(valids, axis=1)
        logits = self._linear(q, f"block{b}.cross.weights")
        wts = T.softmax(T.where(vmask, logits, self._const(-1e9)), axis=1)
        stacked = T.stack(samples, axis=1)
        agg = T.tsum(T.reshape(wts, (q.shape[0], vmask.shape[1], 1)) * stacked, axis=1)
        return agg, vmask.any(axis=1)

    def local_cross_attention(self, q, p, feats, frame, b):
        """Fold the sampled aggregate back into the queries; queries masked
        in every camera pass through unchanged."""
        agg, any_valid = self.gather_point_features(q, p, feats, frame, b)
        out = self._linear(agg, f"block{b}.cross.out")
        updated = T.layer_norm(q + out, self._p(f"block{b}.ln2.g"), self._p(f"block{b}.ln2.b"))
        return T.where(any_valid[:, None], updated, q), any_valid

    def _ffn(self, q, b):
        h = T.relu(self._linear(q, f"block{b}.ffn1"))
        out = self._linear(h, f"block{b}.ffn2")
        return T.layer_norm(q + out, self._p(f"block{b}.ln3.g"), self._p(f"block{b}.ln3.b"))

    def head(self, q, p):
        logits = self._mlp(q, "head.cls")
        reg = self._mlp(q, "head.reg")
        offsets = T.slice_tensor(reg, (slice(None), slice(0, 3)))
        extents = T.softplus(T.slice_tensor(reg, (slice(None), slice(3, 6)))) + EXTENT_FLOOR
        sincos = T.slice_tensor(reg, (slice(None), slice(6, 8)))
        return BlockOutput(cls_logits=logits, offsets=offsets, extents=extents,
                           yaw_sincos=sincos, ref_points=p)

    def forward(self, frame):
        """Run the full decoder; returns (per-block outputs, query set)."""
        self._validate_frame(frame)
        feats = self.backbone_forward(frame)
        qset = self.build_queries(frame, feats)
        q = qset.q
        p = qset.ref_points
        outputs = []
        self.last_invisible_count = 0
        for b in range(self.config.blocks):
            q = self._self_attention(q, b)
            q, any_valid = self.local_cross_attention(q, p, feats, frame, b)
            self.last_invisible_count += int((~any_valid).sum())
            q = self._ffn(q, b)
            out = self.head(q, p)
            outputs.append(out)
            if self.config.refine_points and b < self.config.blocks - 1:
                p = p + out.offsets
        return outputs, qset


def _crop_bounds(center, size, limit):
    if size >= 1.0:
        lo = max(int(math.floor(center - size / 2.0)), 0)
        hi = min(int(math.ceil(center + size / 2.0)), limit)
        if hi > lo:
            return lo, hi
    # degenerate (sub-pixel or fully clipped) box: the nearest pixel
    lo = min(max(int(round(center)), 0), limit - 1)
    return lo, lo + 1


def _scale_bounds(lo, hi, stride, limit):
    flo = max(lo // stride, 0)
    fhi = min(int(math.ceil(hi / stride)), limit)
    if fhi <= flo:
        flo = min(max(flo, 0), limit - 1)
        fhi = flo + 1
    return flo, fhi
