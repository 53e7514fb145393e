"""prior3d: multi-camera 3D cuboid detection with 2D priors on a synthetic world."""

__version__ = "0.1.0"
