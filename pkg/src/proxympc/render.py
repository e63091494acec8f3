"""Deterministic soft rasterizer for both tasks' image observations.

Shapes are drawn by signed-distance coverage (one linear-falloff pixel at
each edge), composited far-to-near, with additive uniform pixel noise from
a caller-supplied generator.  The tethered-mass scene renders to a single
grayscale channel; the rope scene adds a depth channel encoding height as
normalized inverse camera distance, since a top-down view cannot show
height in the gray channel.

All functions are pure given (scene, appearance, rng), so a fixed seed
reproduces frames bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 64

# world windows (xmin, xmax, ymin, ymax) mapped onto the image square
TETHERED_WINDOW = (-1.1, 1.1, -1.1, 1.1)
ROPE_WINDOW = (-1.1, 1.1, -1.1, 1.1)

CAM_HEIGHT = 2.0   # rope camera height for the depth channel


@dataclass
class RandomizationConfig:
    """Geometric + noise domain randomization for simple-system frames."""

    length_range: tuple = (0.4, 1.0)
    mass_radius_range: tuple = (0.04, 0.09)
    line_width_range: tuple = (0.012, 0.03)
    cart_width_range: tuple = (0.1, 0.2)
    n_obstacles_range: tuple = (0, 4)
    obstacle_size_range: tuple = (0.1, 0.5)
    camera_offset: float = 0.01
    noise_level: float = 0.02
    distractor_radius_range: tuple = (0.05, 0.12)
    seed: int = 0

    def __post_init__(self):
        for name in ("length_range", "mass_radius_range", "line_width_range",
                     "cart_width_range", "n_obstacles_range",
                     "obstacle_size_range", "distractor_radius_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} has min > max")
        if self.noise_level < 0 or self.camera_offset < 0:
            raise ValueError("noise level and camera offset must be >= 0")


def _pixel_grid(size, window, offset):
    xmin, xmax, ymin, ymax = window
    xs = xmin + (np.arange(size) + 0.5) * (xmax - xmin) / size + offset[0]
    ys = ymax - (np.arange(size) + 0.5) * (ymax - ymin) / size + offset[1]
    return np.meshgrid(xs, ys)


def _px_scale(size, window):
    xmin, xmax, _, _ = window
    return size / (xmax - xmin)


def _disc_cov(gx, gy, center, radius, scale):
    d = np.hypot(gx - center[0], gy - center[1])
    return np.clip((radius - d) * scale + 0.5, 0.0, 1.0)


def _segment_cov(gx, gy, a, b, halfwidth, scale):
    ab = np.subtract(b, a)
    denom = float(ab @ ab)
    if denom < 1e-16:
        return _disc_cov(gx, gy, a, halfwidth, scale)
    t = np.clip(((gx - a[0]) * ab[0] + (gy - a[1]) * ab[1]) / denom, 0.0, 1.0)
    d = np.hypot(gx - (a[0] + t * ab[0]), gy - (a[1] + t * ab[1]))
    return np.clip((halfwidth - d) * scale + 0.5, 0.0, 1.0)


def _rect_cov(gx, gy, lo, hi, scale):
    dx = np.minimum(gx - lo[0], hi[0] - gx)
    dy = np.minimum(gy - lo[1], hi[1] - gy)
    d = np.minimum(dx, dy)
    return np.clip(d * scale + 0.5, 0.0, 1.0)


def _composite(img, cov, value):
    img *= (1.0 - cov)
    img += cov * value


@dataclass
class TetheredAppearance:
    mass_radius: float = 0.06
    line_width: float = 0.02
    cart_width: float = 0.15
    cart_height: float = 0.05
    camera_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    noise_level: float = 0.02
    distractor: tuple | None = None    # (center (2,), radius)


def sample_tethered_appearance(rand: RandomizationConfig, rng) -> TetheredAppearance:
    distractor = None
    if rng.uniform() < 0.7:
        distractor = (rng.uniform(-0.9, 0.9, size=2),
                      rng.uniform(*rand.distractor_radius_range))
    return TetheredAppearance(
        mass_radius=rng.uniform(*rand.mass_radius_range),
        line_width=rng.uniform(*rand.line_width_range),
        cart_width=rng.uniform(*rand.cart_width_range),
        cart_height=rng.uniform(0.03, 0.07),
        camera_offset=rng.uniform(-rand.camera_offset, rand.camera_offset, size=2),
        noise_level=rand.noise_level,
        distractor=distractor)


def render_tethered(polyline, mass_pos, cart_x, app: TetheredAppearance, rng,
                    target=None, target_radius=0.1, size=IMAGE_SIZE):
    """Grayscale frame of a cart + hanging tether polyline + mass disc.

    ``polyline`` is an (K, 2) array from the cart pivot to the mass; for
    simple-model frames it is just [pivot, mass].
    """
    gx, gy = _pixel_grid(size, TETHERED_WINDOW, app.camera_offset)
    scale = _px_scale(size, TETHERED_WINDOW)
    img = np.zeros((size, size))
    if app.distractor is not None:
        _composite(img, _disc_cov(gx, gy, app.distractor[0], app.distractor[1],
                                  scale), 0.35)
    if target is not None:
        _composite(img, _disc_cov(gx, gy, target, target_radius, scale), 0.35)
    lo = (cart_x - app.cart_width / 2, -app.cart_height / 2)
    hi = (cart_x + app.cart_width / 2, app.cart_height / 2)
    _composite(img, _rect_cov(gx, gy, lo, hi, scale), 0.85)
    poly = np.asarray(polyline, dtype=float)
    for a, b in zip(poly[:-1], poly[1:]):
        _composite(img, _segment_cov(gx, gy, a, b, app.line_width / 2, scale), 0.6)
    _composite(img, _disc_cov(gx, gy, mass_pos, app.mass_radius, scale), 1.0)
    if app.noise_level > 0:
        img += rng.uniform(-app.noise_level, app.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class RopeAppearance:
    line_width: float = 0.025
    gripper_radius: float = 0.03
    camera_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    noise_level: float = 0.02


def sample_rope_appearance(rand: RandomizationConfig, rng) -> RopeAppearance:
    return RopeAppearance(
        line_width=rng.uniform(*rand.line_width_range) + 0.01,
        gripper_radius=rng.uniform(0.025, 0.05),
        camera_offset=rng.uniform(-rand.camera_offset, rand.camera_offset, size=2),
        noise_level=rand.noise_level)


def sample_rope_obstacles(rand: RandomizationConfig, rng):
    """Random axis-aligned boxes for domain-randomized link frames."""
    from .complex_sim import Box

    n = int(rng.integers(rand.n_obstacles_range[0], rand.n_obstacles_range[1] + 1))
    boxes = []
    for _ in range(n):
        center = rng.uniform(-0.8, 0.8, size=2)
        half = rng.uniform(*rand.obstacle_size_range, size=2) / 2
        z_hi = rng.uniform(0.2, 0.8)
        boxes.append(Box(lo=[center[0] - half[0], center[1] - half[1], 0.0],
                         hi=[center[0] + half[0], center[1] + half[1], z_hi]))
    return boxes


def depth_value(z):
    """Height above the floor -> normalized inverse camera distance in [0, 1]."""
    z = np.clip(z, 0.0, CAM_HEIGHT - 1.0)
    inv = 1.0 / (CAM_HEIGHT - z)
    inv_far = 1.0 / CAM_HEIGHT
    inv_near = 1.0 / (CAM_HEIGHT - 1.0)
    return (inv - inv_far) / (inv_near - inv_far)


def render_rope(nodes3d, obstacles, app: RopeAppearance, rng, size=IMAGE_SIZE):
    """Top-down gray+depth frame of a rope polyline over box obstacles.

    Surfaces are composited floor first, then obstacles and rope segments
    ordered by height, so nearer surfaces overwrite farther ones in both
    channels.
    """
    gx, gy = _pixel_grid(size, ROPE_WINDOW, app.camera_offset)
    scale = _px_scale(size, ROPE_WINDOW)
    img = np.zeros((size, size))
    dep = np.zeros((size, size))

    shapes = []
    for box in obstacles:
        shapes.append(("box", float(box.hi[2]), box, 0.45))
    nodes = np.asarray(nodes3d, dtype=float)
    for a, b in zip(nodes[:-1], nodes[1:]):
        # subdivide so the depth channel varies along tilted segments
        pieces = max(1, int(np.ceil(np.linalg.norm(b - a) / 0.05)))
        ts = np.linspace(0.0, 1.0, pieces + 1)
        for t0, t1 in zip(ts[:-1], ts[1:]):
            p0 = a + t0 * (b - a)
            p1 = a + t1 * (b - a)
            shapes.append(("seg", float(0.5 * (p0[2] + p1[2])), (p0, p1), 0.9))
    # the two grippers are rendered distinctly so endpoint identity is visible
    shapes.append(("grip", float(nodes[0, 2]), nodes[0], 1.0))
    shapes.append(("grip", float(nodes[-1, 2]), nodes[-1], 0.7))
    shapes.sort(key=lambda s: s[1])

    for kind, z, obj, value in shapes:
        if kind == "box":
            cov = _rect_cov(gx, gy, obj.lo[:2], obj.hi[:2], scale)
        elif kind == "seg":
            p0, p1 = obj
            cov = _segment_cov(gx, gy, p0[:2], p1[:2], app.line_width / 2, scale)
        else:
            cov = _disc_cov(gx, gy, obj[:2], app.gripper_radius, scale)
        _composite(img, cov, value)
        _composite(dep, cov, depth_value(z))

    if app.noise_level > 0:
        img += rng.uniform(-app.noise_level, app.noise_level, size=img.shape)
        dep += rng.uniform(-app.noise_level, app.noise_level, size=dep.shape)
    return np.stack([np.clip(img, 0, 1), np.clip(dep, 0, 1)], axis=-1)


def flatten_frame(frame):
    """Image array -> flat float vector (the perception input layout)."""
    return np.asarray(frame, dtype=float).reshape(-1)


def write_pgm(path, gray):
    """8-bit binary PGM (P5) writer for a [0,1] grayscale array."""
    arr = np.clip(np.asarray(gray) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path} is not a binary PGM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(float) / maxval


def write_depth(path, depth):
    """Flat little-endian float32 depth file."""
    np.asarray(depth, dtype="<f4").tofile(path)


def read_depth(path, shape):
    return np.fromfile(path, dtype="<f4").reshape(shape).astype(float)
