"""Per-semantic-layer Gaussian mixture landmark model.

The map is initialized by voxelizing the aggregated (prior-transformed)
cloud one semantic layer at a time; each sufficiently occupied voxel
becomes one Gaussian component. Mixing weights are fixed per layer so
every layer contributes equal total weight; they are never re-estimated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose

log = logging.getLogger(__name__)

# Eigenvalue floor for every covariance (m^2). Keeps planar/linear voxels
# invertible; the cap (voxel_size^2) stops runaway scatter.
EPS_REG = 4e-3
MIN_POINTS_PER_VOXEL = 6
# Components whose total responsibility mass falls below this are frozen
# during updates instead of dividing by ~0.
MASS_FLOOR = 1e-6


class InitializationError(Exception):
    """The voxelized cloud produced no usable Gaussian components."""


@dataclass(frozen=True)
class SemanticGaussian:
    """One landmark: a labeled Gaussian in the global frame."""

    mean: np.ndarray
    covariance: np.ndarray
    weight: float
    label: int
    support_count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        cov = np.asarray(self.covariance, dtype=float).reshape(3, 3)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("non-finite Gaussian parameters")
        if np.max(np.abs(cov - cov.T)) > 1e-12:
            raise ValueError("covariance not symmetric within 1e-12")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight {self.weight} outside (0, 1]")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


class LayerParams:
    """Array-of-components view of one semantic layer.

    Means/covariances live in stacked arrays so the solver can batch over
    a layer; iteration yields SemanticGaussian views for inspection.
    """

    def __init__(self, label, means, covs, weights, support, voxel_size):
        self.label = int(label)
        self.means = np.asarray(means, dtype=float).reshape(-1, 3)
        self.covs = np.asarray(covs, dtype=float).reshape(-1, 3, 3)
        self.weights = np.asarray(weights, dtype=float).reshape(-1)
        self.support = np.asarray(support, dtype=np.int64).reshape(-1)
        self.voxel_size = float(voxel_size)
        n = len(self.means)
        if not (len(self.covs) == len(self.weights) == len(self.support) == n):
            raise ValueError("inconsistent component arrays")
        # Whitening caches: Sigma^(-1/2), Sigma^(-1), log|Sigma|, plus the
        # row-stacked form used to whiten a whole point set in one product.
        evals, evecs = np.linalg.eigh(self.covs)
        if np.any(evals <= 0):
            raise ValueError("covariances must be positive definite")
        self.inv_sqrt = np.einsum("jab,jb,jcb->jac", evecs, 1.0 / np.sqrt(evals), evecs)
        self.inv = np.einsum("jab,jb,jcb->jac", evecs, 1.0 / evals, evecs)
        self.logdet = np.sum(np.log(evals), axis=1)
        self.inv_sqrt_rows = np.ascontiguousarray(self.inv_sqrt.reshape(-1, 3))
        self.white_means = np.einsum("jab,jb->ja", self.inv_sqrt, self.means)

    def __len__(self) -> int:
        return len(self.means)

    def __iter__(self):
        for j in range(len(self)):
            yield SemanticGaussian(
                mean=self.means[j],
                covariance=self.covs[j],
                weight=float(self.weights[j]),
                label=self.label,
                support_count=int(self.support[j]),
            )


@dataclass(frozen=True)
class SemanticGMM:
    """Mixture over all layers; weights sum to 1 across the whole model."""

    layers: dict = field(default_factory=dict)  # label -> LayerParams

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def labels(self) -> list:
        return sorted(self.layers)

    @property
    def total_components(self) -> int:
        return sum(len(p) for p in self.layers.values())

    def layer_sizes(self) -> dict:
        return {label: len(p) for label, p in self.layers.items()}

    def weight_sum(self) -> float:
        return float(sum(p.weights.sum() for p in self.layers.values()))

    def restricted(self, labels) -> "SemanticGMM":
        """Sub-model containing only the given layers (weights untouched)."""
        return SemanticGMM({s: p for s, p in self.layers.items() if s in set(labels)})


@dataclass(frozen=True)
class VoxelGrid:
    """floor(p / voxel_size) binning of one layer's points."""

    voxel_size: float
    cells: dict  # (i, j, k) -> (n, 3) points array

    @classmethod
    def from_points(cls, points: np.ndarray, voxel_size: float) -> "VoxelGrid":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        cells = {}
        if len(points) == 0:
            return cls(voxel_size=voxel_size, cells=cells)
        coords = np.floor(points / voxel_size).astype(np.int64)
        perm = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        sorted_coords = coords[perm]
        boundaries = np.flatnonzero(np.any(np.diff(sorted_coords, axis=0) != 0, axis=1)) + 1
        for chunk in np.split(perm, boundaries):
            cells[tuple(coords[chunk[0]])] = points[chunk]
        return cls(voxel_size=voxel_size, cells=cells)


def regularize_covariance(S: np.ndarray, floor: float = EPS_REG, cap: float = None) -> np.ndarray:
    """Clamp eigenvalues of a symmetric matrix into [floor, cap]; result SPD."""
    S = np.asarray(S, dtype=float).reshape(3, 3)
    scale = max(1.0, float(np.max(np.abs(S))))
    if np.max(np.abs(S - S.T)) > 1e-9 * scale:
        raise ValueError("regularize_covariance expects a symmetric matrix")
    evals, evecs = np.linalg.eigh(0.5 * (S + S.T))
    evals = np.clip(evals, floor, cap)
    out = (evecs * evals) @ evecs.T
    return 0.5 * (out + out.T)


def _voxel_components(points: np.ndarray, voxel_size: float, min_points: int):
    """Per-voxel (mean, unbiased covariance, count), voxels in sorted cell order."""
    grid = VoxelGrid.from_points(points, voxel_size)
    out = []
    for key in sorted(grid.cells):
        pts = grid.cells[key]
        if len(pts) < min_points:
            continue
        mu = pts.mean(axis=0)
        cov = np.cov(pts, rowvar=False, ddof=1)
        out.append((mu, cov, len(pts)))
    return out


def init_from_voxels(
    scans,
    priors,
    label_map,
    sizes,
    min_points_per_voxel: int = MIN_POINTS_PER_VOXEL,
) -> SemanticGMM:
    """Build the mixture from prior-transformed scans, one layer per label.

    ``sizes`` is either a single voxel edge length or a mapping from class
    id to edge length. Layers that yield no component are dropped with a
    warning; a model with no components at all raises InitializationError.
    """
    if len(scans) != len(priors):
        raise ValueError(f"{len(scans)} scans vs {len(priors)} priors")

    per_label = {}
    for scan, prior in zip(scans, priors):
        global_pts = scan.positions @ prior.rotation.T + prior.translation
        for label in np.unique(scan.labels):
            label = int(label)
            if not label_map.is_stable(label):
                continue
            per_label.setdefault(label, []).append(global_pts[scan.labels == label])

    layers = {}
    for label in sorted(per_label):
        pts = np.vstack(per_label[label])
        v = sizes[label] if isinstance(sizes, dict) else float(sizes)
        comps = _voxel_components(pts, v, min_points_per_voxel)
        if not comps:
            log.warning(
                "layer %s (%s): no voxel reached %d points, dropping layer",
                label,
                label_map.name_of(label),
                min_points_per_voxel,
            )
            continue
        means = np.array([c[0] for c in comps])
        covs = np.array([regularize_covariance(c[1], EPS_REG, v * v) for c in comps])
        support = np.array([c[2] for c in comps])
        weights = np.full(len(comps), 1.0 / len(comps))  # placeholder until set_mixing
        layers[label] = LayerParams(label, means, covs, weights, support, v)

    if not layers:
        raise InitializationError("voxelization produced an empty model")
    return set_mixing(SemanticGMM(layers))


def set_mixing(model: SemanticGMM) -> SemanticGMM:
    """Fix every weight in layer s to 1 / (N_s * J_s); layers weigh equally."""
    n_layers = model.n_layers
    layers = {}
    for label, p in model.layers.items():
        w = 1.0 / (n_layers * len(p))
        layers[label] = LayerParams(
            label, p.means, p.covs, np.full(len(p), w), p.support, p.voxel_size
        )
    return SemanticGMM(layers)


def update_landmarks(model: SemanticGMM, scans, poses, responsibilities) -> SemanticGMM:
    """Conditional M-step on the landmarks at fixed poses and responsibilities.

    Means become responsibility-weighted averages of the freshly transformed
    points; covariances the weighted scatter about the new mean, regularized.
    Weights stay fixed; components with negligible mass are left untouched.
    """
    mass = {s: np.zeros(len(p)) for s, p in model.layers.items()}
    first = {s: np.zeros((len(p), 3)) for s, p in model.layers.items()}
    second = {s: np.zeros((len(p), 3, 3)) for s, p in model.layers.items()}

    for (k, label), block in sorted(responsibilities.blocks.items()):
        if label not in model.layers:
            continue
        scan, pose = scans[k], poses[k]
        pts = scan.positions[block.point_idx] @ pose.rotation.T + pose.translation
        alpha = block.alpha
        mass[label] += alpha.sum(axis=0)
        first[label] += alpha.T @ pts
        for a in range(3):
            second[label][:, a, :] += (alpha * pts[:, a, None]).T @ pts

    layers = {}
    for label, p in model.layers.items():
        touched = np.flatnonzero(mass[label] >= MASS_FLOOR)
        if len(touched) == 0:
            layers[label] = p  # layer untouched; LayerParams is never mutated
            continue
        means = p.means.copy()
        covs = p.covs.copy()
        m = mass[label]
        for j in touched:
            mu = first[label][j] / m[j]
            scatter = second[label][j] / m[j] - np.outer(mu, mu)
            means[j] = mu
            covs[j] = regularize_covariance(
                0.5 * (scatter + scatter.T), EPS_REG, p.voxel_size**2
            )
        layers[label] = LayerParams(label, means, covs, p.weights, p.support, p.voxel_size)
    return SemanticGMM(layers)


def dump_gmm(model: SemanticGMM) -> dict:
    """JSON-ready document: per-layer component list, covariance row-major."""
    layers = []
    for label in model.labels:
        p = model.layers[label]
        layers.append(
            {
                "label": label,
                "components": [
                    {
                        "mean": [float(x) for x in p.means[j]],
                        "covariance": [float(x) for x in p.covs[j].reshape(-1)],
                        "weight": float(p.weights[j]),
                        "support": int(p.support[j]),
                    }
                    for j in range(len(p))
                ],
            }
        )
    return {"layers": layers}


def write_gmm_json(path, model: SemanticGMM) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dump_gmm(model), f, indent=2)
        f.write("\n")


def _label_color(label: int):
    rng = np.random.default_rng(label)
    return rng.integers(40, 256, size=3)


def write_gmm_ply(path, model: SemanticGMM) -> None:
    """ASCII PLY of component means, colored by label, for external viewers."""
    rows = []
    for label in model.labels:
        r, g, b = _label_color(label)
        for mu in model.layers[label].means:
            rows.append(f"{mu[0]:.6f} {mu[1]:.6f} {mu[2]:.6f} {r} {g} {b}")
    header = "\n".join(
        [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(rows)}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "end_header",
        ]
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(header + "\n" + "\n".join(rows) + "\n")
