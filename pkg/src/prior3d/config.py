"""Hierarchical run configuration: scene, noise, model, training, eval
sections plus the seed. Unknown keys are rejected; the resolved config is
echoed verbatim into every run's artifacts."""

import json
from dataclasses import dataclass, field

from .detector import DecoderConfig
from .evaluation import EvalConfig
from .scene import PriorNoiseConfig, SceneConfig
from .training import TrainConfig

SECTIONS = ("scene", "noise", "model", "training", "eval")


def default_noise():
    """Imperfect-but-decent 2D backbone: mild jitter, occasional misses,
    some clutter, softened maps."""
    return PriorNoiseConfig(center_sigma_px=1.5, size_sigma_rel=0.08,
                            score_beta=(6.0, 2.0), false_negative_prob=0.08,
                            false_positive_rate=0.5, map_blur_sigma=1.0,
                            map_noise_sigma=0.05)


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: PriorNoiseConfig = field(default_factory=default_noise)
    model: DecoderConfig = field(default_factory=DecoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self):
        return {"scene": self.scene.to_dict(), "noise": self.noise.to_dict(),
                "model": self.model.to_dict(), "training": self.training.to_dict(),
                "eval": self.eval.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        known = set(SECTIONS) | {"seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config section(s): {sorted(unknown)}")
        kw = {}
        builders = {"scene": SceneConfig, "noise": PriorNoiseConfig,
                    "model": DecoderConfig, "training": TrainConfig, "eval": EvalConfig}
        for name, builder in builders.items():
            if name in d:
                try:
                    kw[name] = builder.from_dict(d[name])
                except TypeError as e:
                    raise ValueError(f"bad key in config section {name!r}: {e}") from e
        if "noise" not in kw:
            kw["noise"] = default_noise()
        return cls(seed=d.get("seed", 0), **kw)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    def apply_overrides(self, overrides):
        """Apply "section.key=value" strings (values parsed as JSON when
        possible); flags always win over the config file."""
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not of the form section.key=value")
            path, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if path == "seed":
                self.seed = int(value)
                continue
            if "." not in path:
                raise ValueError(f"override target {path!r} must be section.key")
            section, key = path.split(".", 1)
            if section not in SECTIONS:
                raise ValueError(f"unknown config section {section!r}")
            target = getattr(self, section)
            if not hasattr(target, key):
                raise ValueError(f"unknown key {key!r} in config section {section!r}")
            if isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            setattr(target, key, value)
        return self
