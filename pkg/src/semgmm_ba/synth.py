"""Synthetic labeled worlds and a scan simulator for desk-scale benchmarks.

Surfaces are sampled uniformly by area (planes) or length (poles) rather
than by simulated beams; the optimization under test is agnostic to beam
geometry, and uniform sampling keeps the ground truth exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud_io import Scan
from .geometry import Pose, Twist, compose, exp_map, inverse

DEFAULT_NOISE_SIGMA = 0.02  # typical LiDAR ranging noise, meters

# Class ids follow the default label map:
# car 10, road 40, building 50, trunk 71, pole 80.
CAR_LABEL = 10
GROUND_LABEL = 40
WALL_LABEL = 50
TRUNK_LABEL = 71
POLE_LABEL = 80

BENCHMARK_SCENES = ("corridor-degenerate", "urban-block", "ground-only")


@dataclass(frozen=True)
class Plane:
    """Rectangular patch: center, unit normal, full side lengths, pts per m^2."""

    center: tuple
    normal: tuple
    extent: tuple
    label: int
    density: float

    def basis(self):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        helper = np.zeros(3)
        helper[int(np.argmin(np.abs(n)))] = 1.0
        u = np.cross(n, helper)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return n, u, v

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        lu, lv = self.extent
        count = int(round(lu * lv * self.density))
        _, u, v = self.basis()
        a = rng.uniform(-0.5 * lu, 0.5 * lu, size=count)
        b = rng.uniform(-0.5 * lv, 0.5 * lv, size=count)
        return np.asarray(self.center, dtype=float) + a[:, None] * u + b[:, None] * v


@dataclass(frozen=True)
class Pole:
    """Cylinder shell: base point, unit axis, radius, height, pts per meter."""

    base: tuple
    axis: tuple
    radius: float
    height: float
    label: int
    density: float

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        count = int(round(self.height * self.density))
        axis = np.asarray(self.axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        helper = np.zeros(3)
        helper[int(np.argmin(np.abs(axis)))] = 1.0
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        h = rng.uniform(0.0, self.height, size=count)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
        lateral = self.radius * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v)
        return np.asarray(self.base, dtype=float) + h[:, None] * axis + lateral


@dataclass(frozen=True)
class SceneSpec:
    surfaces: tuple

    def labels(self) -> list:
        return sorted({s.label for s in self.surfaces})


@dataclass
class SimulatedScanner:
    """Stateful sampler: consecutive renders consume one seeded RNG stream."""

    max_range: float = 120.0
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        self.rng = np.random.default_rng(self.rng_seed)


def render_scan(scene: SceneSpec, pose: Pose, scanner: SimulatedScanner, index: int = 0) -> Scan:
    """Sample the scene around a pose and express the points in its frame.

    Surface points within scanner range are transformed into the sensor
    frame and perturbed with isotropic Gaussian noise; labels come from the
    generating surface. A scene entirely out of range yields an empty scan.
    """
    sensor = inverse(pose)
    chunks, labels = [], []
    for surface in scene.surfaces:
        pts = surface.sample(scanner.rng)
        in_range = np.linalg.norm(pts - pose.translation, axis=1) <= scanner.max_range
        pts = pts[in_range]
        if len(pts) == 0:
            continue
        local = pts @ sensor.rotation.T + sensor.translation
        if scanner.noise_sigma > 0:
            local = local + scanner.rng.normal(0.0, scanner.noise_sigma, size=local.shape)
        chunks.append(local)
        labels.append(np.full(len(local), surface.label, dtype=np.uint16))
    if not chunks:
        return Scan(index=index, positions=np.zeros((0, 3)), labels=np.zeros(0, dtype=np.uint16))
    return Scan(index=index, positions=np.vstack(chunks), labels=np.concatenate(labels))


def perturb_trajectory(poses, sigma_t: float, sigma_r: float, seed=0) -> list:
    """Left-compose each pose except the first with a random twist.

    Twist components are zero-mean Gaussians: rotation parts with std
    ``sigma_r`` (radians), translation parts with std ``sigma_t`` (meters).
    Index 0 is the gauge anchor and is returned untouched.
    """
    if sigma_t < 0 or sigma_r < 0:
        raise ValueError("perturbation stds must be non-negative")
    rng = np.random.default_rng(seed)
    out = [poses[0]]
    for pose in poses[1:]:
        xi = Twist(rng.normal(0.0, sigma_r, 3), rng.normal(0.0, sigma_t, 3))
        out.append(compose(exp_map(xi), pose))
    return out


def straight_trajectory(n: int, spacing: float = 0.9, height: float = 1.7) -> list:
    """n poses heading along +x at sensor height, centered on the origin."""
    xs = (np.arange(n) - 0.5 * (n - 1)) * spacing
    return [Pose(np.eye(3), np.array([x, 0.0, height])) for x in xs]


def _car(cx: float, cy: float, heading_x: bool = True) -> tuple:
    """Car-sized box shell: two side planes and two end planes."""
    half_l, half_w, mid_z, h = 2.1, 0.85, 0.75, 1.4
    if heading_x:
        return (
            Plane((cx, cy + half_w, mid_z), (0.0, 1.0, 0.0), (2 * half_l, h), CAR_LABEL, 6.5),
            Plane((cx, cy - half_w, mid_z), (0.0, 1.0, 0.0), (2 * half_l, h), CAR_LABEL, 6.5),
            Plane((cx + half_l, cy, mid_z), (1.0, 0.0, 0.0), (2 * half_w, h), CAR_LABEL, 6.5),
            Plane((cx - half_l, cy, mid_z), (1.0, 0.0, 0.0), (2 * half_w, h), CAR_LABEL, 6.5),
        )
    return (
        Plane((cx + half_w, cy, mid_z), (1.0, 0.0, 0.0), (2 * half_l, h), CAR_LABEL, 6.5),
        Plane((cx - half_w, cy, mid_z), (1.0, 0.0, 0.0), (2 * half_l, h), CAR_LABEL, 6.5),
        Plane((cx, cy + half_l, mid_z), (0.0, 1.0, 0.0), (2 * half_w, h), CAR_LABEL, 6.5),
        Plane((cx, cy - half_l, mid_z), (0.0, 1.0, 0.0), (2 * half_w, h), CAR_LABEL, 6.5),
    )


def make_benchmark_scene(name: str, n_frames: int = 10):
    """Deterministic benchmark scene plus its ground-truth trajectory."""
    if name == "ground-only":
        surfaces = (
            Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (70.0, 70.0), GROUND_LABEL, 2.5),
        )
    elif name == "corridor-degenerate":
        # Long corridor along x: the planar layers leave the along-corridor
        # translation unconstrained; the poles are the only features that
        # break the symmetry.
        surfaces = (
            Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (64.0, 8.0), GROUND_LABEL, 2.5),
            Plane((0.0, 4.0, 2.5), (0.0, 1.0, 0.0), (64.0, 5.0), WALL_LABEL, 3.0),
            Plane((0.0, -4.0, 2.5), (0.0, 1.0, 0.0), (64.0, 5.0), WALL_LABEL, 3.0),
            Pole((-14.0, 3.2, 0.0), (0.0, 0.0, 1.0), 0.25, 5.0, POLE_LABEL, 60.0),
            Pole((-8.0, -3.2, 0.0), (0.0, 0.0, 1.0), 0.25, 5.0, POLE_LABEL, 60.0),
            Pole((-2.5, 3.2, 0.0), (0.0, 0.0, 1.0), 0.25, 5.0, POLE_LABEL, 60.0),
            Pole((3.0, -3.2, 0.0), (0.0, 0.0, 1.0), 0.25, 5.0, POLE_LABEL, 60.0),
            Pole((8.5, 3.2, 0.0), (0.0, 0.0, 1.0), 0.25, 5.0, POLE_LABEL, 60.0),
            Pole((14.0, -3.2, 0.0), (0.0, 0.0, 1.0), 0.25, 5.0, POLE_LABEL, 60.0),
        )
    elif name == "urban-block":
        surfaces = (
            Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (24.0, 24.0), GROUND_LABEL, 2.0),
            Plane((10.0, 0.0, 2.5), (1.0, 0.0, 0.0), (20.0, 5.0), WALL_LABEL, 3.0),
            Plane((0.0, 10.0, 2.5), (0.0, 1.0, 0.0), (20.0, 5.0), WALL_LABEL, 3.0),
            Pole((4.5, -4.5, 0.0), (0.0, 0.0, 1.0), 0.25, 4.0, POLE_LABEL, 32.0),
            Pole((-5.0, 3.5, 0.0), (0.0, 0.0, 1.0), 0.25, 4.0, POLE_LABEL, 32.0),
            Pole((7.0, 4.5, 0.0), (0.0, 0.0, 1.0), 0.25, 4.0, POLE_LABEL, 32.0),
            Pole((-3.5, -6.5, 0.0), (0.0, 0.0, 1.0), 0.25, 4.0, POLE_LABEL, 32.0),
            Pole((1.5, 7.0, 0.0), (0.0, 0.0, 1.0), 0.25, 4.0, POLE_LABEL, 32.0),
            Pole((-7.5, -1.5, 0.0), (0.0, 0.0, 1.0), 0.25, 4.0, POLE_LABEL, 32.0),
            Pole((6.0, -7.0, 0.0), (0.0, 0.0, 1.0), 0.35, 3.5, TRUNK_LABEL, 35.0),
            Pole((-6.5, 5.5, 0.0), (0.0, 0.0, 1.0), 0.35, 3.5, TRUNK_LABEL, 35.0),
        ) + _car(3.0, 3.5) + _car(-3.0, -4.0, heading_x=False) + _car(-6.0, 1.0)
    else:
        raise ValueError(f"unknown benchmark scene {name!r}; pick one of {BENCHMARK_SCENES}")
    return SceneSpec(surfaces=surfaces), straight_trajectory(n_frames)
