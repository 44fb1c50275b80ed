"""Expectation-conditional-maximization over a window of scans.

One iteration runs: semantic-gated E-step, reduction of point-level
responsibilities to per-(scan, landmark) virtual measurements, a whitened
Gauss-Newton step on the free poses (first pose gauge-fixed), and the
closed-form landmark update. Iterates are accepted only while the
monitored objective does not increase, so the recorded trace is monotone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gmm_map
from .geometry import relative_twist, retract

log = logging.getLogger(__name__)


class DegenerateSolveError(Exception):
    """The stacked normal equations are numerically rank-deficient."""


class DegeneracyAbort(Exception):
    """Raised by an iteration guard when the window turns ill-conditioned."""

    def __init__(self, kappa: float, message: str = ""):
        super().__init__(message or f"condition number {kappa:.3g} over threshold")
        self.kappa = kappa


@dataclass(frozen=True)
class EcmConfig:
    max_ecm_iters: int = 30
    pose_tol: float = 1e-5  # meters + radians, twist-update norm
    gate_radius_sigma: float = 3.0
    inner_gn_iters: int = 10

    def __post_init__(self):
        for name in ("max_ecm_iters", "pose_tol", "gate_radius_sigma", "inner_gn_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ResponsibilityBlock:
    """Gated posteriors of one scan against one layer.

    ``alpha[i, j]`` is the posterior of point ``point_idx[i]`` belonging to
    component j of the layer; rows sum to 1, entries outside the gate are
    exactly zero. Points of the scan with no gated candidate do not appear.
    """

    point_idx: np.ndarray  # (n,) indices into the scan
    alpha: np.ndarray  # (n, J_layer)


@dataclass(frozen=True)
class ResponsibilityTable:
    blocks: dict  # (scan position k, label) -> ResponsibilityBlock
    gate_radius_sigma: float

    def candidates_for(self, k: int, point_index: int):
        """(label, component index, alpha) triples for one point; [] if ungated."""
        out = []
        for (bk, label), block in self.blocks.items():
            if bk != k:
                continue
            rows = np.flatnonzero(block.point_idx == point_index)
            for i in rows:
                for j in np.flatnonzero(block.alpha[i] > 0.0):
                    out.append((label, int(j), float(block.alpha[i, j])))
        return out

    def gated_point_count(self, k: int) -> int:
        return sum(len(b.point_idx) for (bk, _), b in self.blocks.items() if bk == k)

    def layer_point_counts(self) -> dict:
        counts = {}
        for (_, label), block in self.blocks.items():
            counts[label] = counts.get(label, 0) + len(block.point_idx)
        return counts


@dataclass(frozen=True)
class VirtualMeasurementSet:
    """Per-(scan, landmark) weighted centroids w (scan frame) and masses beta."""

    scan_idx: np.ndarray  # (M,)
    labels: np.ndarray  # (M,)
    comp_idx: np.ndarray  # (M,) component index within the layer
    w: np.ndarray  # (M, 3)
    beta: np.ndarray  # (M,)

    def __len__(self) -> int:
        return len(self.beta)


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    max_twist_update: float
    layer_point_counts: dict
    kappa: float = float("nan")


@dataclass
class EcmTrace:
    iterations: list = field(default_factory=list)
    stop_reason: str = ""

    def objectives(self) -> list:
        return [rec.objective for rec in self.iterations]

    def csv_rows(self) -> list:
        """Rows of (iter, objective, max twist norm, per-layer point counts)."""
        rows = [("iter", "objective", "max_twist_norm", "layer_point_counts")]
        for rec in self.iterations:
            packed = ";".join(f"{s}={n}" for s, n in sorted(rec.layer_point_counts.items()))
            rows.append((rec.iteration, f"{rec.objective:.17g}", f"{rec.max_twist_update:.17g}", packed))
        return rows


def _layer_mahalanobis_sq(layer, pts: np.ndarray) -> np.ndarray:
    """(n, J) squared Mahalanobis distances of global points to one layer."""
    white_pts = (pts @ layer.inv_sqrt_rows.T).reshape(len(pts), -1, 3)  # (n, J, 3)
    d = white_pts - layer.white_means[None, :, :]
    return np.einsum("nja,nja->nj", d, d)


def _e_step_with_distances(scans, poses, model, cfg: EcmConfig, labels=None):
    """E-step plus the dense per-(scan, label) distance matrices it computed.

    The distance stash maps (scan position, label) to (point index array,
    (n, J) squared Mahalanobis distances) at the given poses and model; the
    iteration loop reuses it to price the previous iterate's objective.
    """
    use_labels = set(model.labels if labels is None else labels) & set(model.labels)
    gate_sq = cfg.gate_radius_sigma**2
    blocks = {}
    stash = {}
    for k, (scan, pose) in enumerate(zip(scans, poses)):
        for label in sorted(use_labels):
            idx = scan.label_indices(label)
            if len(idx) == 0:
                continue
            layer = model.layers[label]
            pts = scan.positions[idx] @ pose.rotation.T + pose.translation
            md_sq = _layer_mahalanobis_sq(layer, pts)
            stash[(k, label)] = (idx, md_sq)
            gated = md_sq <= gate_sq
            keep = gated.any(axis=1)
            if not keep.any():
                continue
            gated = gated[keep]
            # log posterior up to the per-point constant, -inf outside gate
            loglik = np.where(
                gated,
                np.log(layer.weights)[None, :] - 0.5 * (md_sq[keep] + layer.logdet[None, :]),
                -np.inf,
            )
            peak = loglik.max(axis=1, keepdims=True)
            unnorm = np.exp(loglik - peak)
            alpha = unnorm / unnorm.sum(axis=1, keepdims=True)
            blocks[(k, label)] = ResponsibilityBlock(point_idx=idx[keep], alpha=alpha)
    table = ResponsibilityTable(blocks=blocks, gate_radius_sigma=cfg.gate_radius_sigma)
    return table, stash


def e_step(scans, poses, model, cfg: EcmConfig, labels=None) -> ResponsibilityTable:
    """Gated posteriors per point over same-label components.

    A component is a candidate for a point when the Mahalanobis distance of
    the transformed point is at most ``gate_radius_sigma``; posteriors are
    Bayes weights (mixing weight times Gaussian density) renormalized over
    the candidates. Cross-label pairs never appear.
    """
    table, _ = _e_step_with_distances(scans, poses, model, cfg, labels)
    return table


def reduce_virtual(table: ResponsibilityTable, scans) -> VirtualMeasurementSet:
    """Collapse point-level responsibilities into per-landmark centroids.

    w_kj is the alpha-weighted average of scan k's points assigned to
    component j, in the scan's own frame; beta_kj the total mass. Pairs
    with mass below 1e-9 are omitted.
    """
    scan_idx, labels, comp_idx, ws, betas = [], [], [], [], []
    for (k, label), block in sorted(table.blocks.items()):
        z = scans[k].positions[block.point_idx]
        beta = block.alpha.sum(axis=0)
        keep = np.flatnonzero(beta >= 1e-9)
        if len(keep) == 0:
            continue
        w = (block.alpha[:, keep].T @ z) / beta[keep, None]
        scan_idx.append(np.full(len(keep), k))
        labels.append(np.full(len(keep), label))
        comp_idx.append(keep)
        ws.append(w)
        betas.append(beta[keep])
    if not scan_idx:
        return VirtualMeasurementSet(
            scan_idx=np.zeros(0, dtype=int),
            labels=np.zeros(0, dtype=int),
            comp_idx=np.zeros(0, dtype=int),
            w=np.zeros((0, 3)),
            beta=np.zeros(0),
        )
    return VirtualMeasurementSet(
        scan_idx=np.concatenate(scan_idx).astype(int),
        labels=np.concatenate(labels).astype(int),
        comp_idx=np.concatenate(comp_idx).astype(int),
        w=np.vstack(ws),
        beta=np.concatenate(betas),
    )


def _vm_params(vms: VirtualMeasurementSet, model):
    """Stacked landmark mean / inverse-sqrt-covariance per virtual measurement."""
    mus = np.zeros((len(vms), 3))
    inv_sqrts = np.zeros((len(vms), 3, 3))
    for label in np.unique(vms.labels):
        layer = model.layers[int(label)]
        rows = np.flatnonzero(vms.labels == label)
        mus[rows] = layer.means[vms.comp_idx[rows]]
        inv_sqrts[rows] = layer.inv_sqrt[vms.comp_idx[rows]]
    return mus, inv_sqrts


def reduced_objective(vms: VirtualMeasurementSet, model, poses) -> float:
    """Sum of beta-weighted squared Mahalanobis residuals of the centroids."""
    if len(vms) == 0:
        return 0.0
    mus, inv_sqrts = _vm_params(vms, model)
    res = _whitened_residuals(vms, mus, inv_sqrts, poses)
    return float(np.sum(res**2))


def _whitened_residuals(vms, mus, inv_sqrts, poses):
    rot = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])
    moved = np.einsum("mab,mb->ma", rot[vms.scan_idx], vms.w) + trans[vms.scan_idx]
    white = np.einsum("mab,mb->ma", inv_sqrts, moved - mus)
    return np.sqrt(vms.beta)[:, None] * white


def _skew_batch(v: np.ndarray) -> np.ndarray:
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def assemble_system(vms, mus, inv_sqrts, poses, free):
    """Stacked whitened linearization at the given poses.

    Rows are sqrt(beta) * Sigma^(-1/2) * [-skew(R w) | I] per virtual
    measurement on a free pose, in that pose's 6 columns (rotation error
    first); b holds the whitened negated residuals. Returns (H, b, kept)
    where ``kept`` indexes the contributing virtual measurements.
    """
    col_of = {k: 6 * i for i, k in enumerate(free)}
    kept = np.flatnonzero(np.isin(vms.scan_idx, free))
    M = len(kept)
    H = np.zeros((3 * M, 6 * len(free)))
    b = np.zeros(3 * M)
    if M == 0:
        return H, b, kept
    rot = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])
    scan_of = vms.scan_idx[kept]
    Rw = np.einsum("mab,mb->ma", rot[scan_of], vms.w[kept])
    W = np.sqrt(vms.beta[kept])[:, None, None] * inv_sqrts[kept]
    blocks = np.concatenate([-np.matmul(W, _skew_batch(Rw)), W], axis=2)  # (M, 3, 6)
    res = np.einsum("mab,mb->ma", W, Rw + trans[scan_of] - mus[kept])
    cols = np.array([col_of[int(k)] for k in scan_of])
    row_ids = 3 * np.arange(M)[:, None, None] + np.arange(3)[None, :, None]
    col_ids = (cols[:, None, None] + np.arange(6)[None, None, :]) * np.ones(
        (1, 3, 1), dtype=int
    )
    H[row_ids, col_ids] = blocks
    b[(3 * np.arange(M)[:, None] + np.arange(3)[None, :])] = -res
    return H, b, kept


def m_step_poses(vms: VirtualMeasurementSet, model, priors, cfg: EcmConfig, free_mask=None):
    """Gauss-Newton on the reduced least-squares problem over the free poses.

    Residuals are whitened by sqrt(beta) * Sigma^(-1/2); the stacked normal
    equations are solved with a rank-revealing decomposition, poses updated
    through the split error state (left rotation, additive translation).
    Raises DegenerateSolveError when the system is rank-deficient. The
    returned poses never have a larger reduced objective than the priors;
    the gauge pose is returned bit-identical.
    """
    poses = list(priors)
    if free_mask is None:
        free_mask = [False] + [True] * (len(poses) - 1)
    free = [k for k, f in enumerate(free_mask) if f]
    if not free or len(vms) == 0:
        return poses
    col_of = {k: 6 * i for i, k in enumerate(free)}
    mus, inv_sqrts = _vm_params(vms, model)
    if not np.isin(vms.scan_idx, free).any():
        return poses

    f_curr = float(np.sum(_whitened_residuals(vms, mus, inv_sqrts, poses) ** 2))
    for _ in range(cfg.inner_gn_iters):
        H, b, _ = assemble_system(vms, mus, inv_sqrts, poses, free)
        delta, _, rank, _ = np.linalg.lstsq(H, b, rcond=1e-12)
        if rank < 6 * len(free):
            raise DegenerateSolveError(
                f"normal equations rank {rank} < {6 * len(free)} free parameters"
            )

        # Backtrack until the step does not increase the reduced objective.
        step = 1.0
        accepted = False
        for _ in range(24):
            trial = list(poses)
            for k in free:
                trial[k] = retract(poses[k], step * delta[col_of[k] : col_of[k] + 6])
            f_trial = float(np.sum(_whitened_residuals(vms, mus, inv_sqrts, trial) ** 2))
            if f_trial <= f_curr:
                poses, f_curr, accepted = trial, f_trial, True
                break
            step *= 0.5
        if not accepted:
            break
        update_norm = max(
            float(np.linalg.norm(step * delta[col_of[k] : col_of[k] + 6])) for k in free
        )
        if update_norm < cfg.pose_tol:
            break
    return poses


def objective(scans, poses, model, table: ResponsibilityTable) -> float:
    """Monitored objective: sum of alpha * (mahalanobis^2 + log|Sigma|).

    Evaluated only on the (point, component) pairs the table holds; points
    with no gated candidate contribute nothing.
    """
    total = 0.0
    for (k, label), block in table.blocks.items():
        if label not in model.layers:
            continue
        layer = model.layers[label]
        pose = poses[k]
        pts = scans[k].positions[block.point_idx] @ pose.rotation.T + pose.translation
        md_sq = _layer_mahalanobis_sq(layer, pts)
        total += float(np.sum(block.alpha * (md_sq + layer.logdet[None, :])))
    return total


def _objective_from_stash(stash, model, table: ResponsibilityTable) -> float:
    """Objective of an earlier iterate, reusing distances a later E-step made.

    Valid because the E-step following iterate n evaluates distances at
    exactly iterate n's poses and model.
    """
    total = 0.0
    for (k, label), block in table.blocks.items():
        if label not in model.layers or (k, label) not in stash:
            continue
        idx, md_sq = stash[(k, label)]
        rows = np.searchsorted(idx, block.point_idx)
        total += float(
            np.sum(block.alpha * (md_sq[rows] + model.layers[label].logdet[None, :]))
        )
    return total


def ecm_iterate(scans, priors, model, cfg: EcmConfig, selected_labels, guard=None):
    """Full ECM loop; returns (poses, model, EcmTrace).

    ``guard``, when given, is called as guard(poses, model, vms) before each
    pose step and may raise DegeneracyAbort; its float return value (a
    condition number) is recorded in the trace. An iterate that would
    increase the monitored objective is discarded and iteration stops, so
    the recorded objectives are non-increasing.

    Each iterate's objective is priced from the distance matrices of the
    following E-step (they are evaluated at exactly that iterate's poses
    and model); only the final iterate needs a dedicated pass.
    """
    selected = [s for s in selected_labels if s in model.layers]
    if not selected:
        raise ValueError("selected label set is empty or absent from the model")
    poses = list(priors)
    trace = EcmTrace()
    prev_obj = None
    pending = None  # iterate awaiting its objective: (record, table, input poses+model)

    def accept(record, obj):
        nonlocal prev_obj
        if prev_obj is not None and obj > prev_obj:
            log.debug(
                "iteration %d discarded: objective %.9g > %.9g",
                record.iteration, obj, prev_obj,
            )
            return False
        record.objective = obj
        trace.iterations.append(record)
        prev_obj = obj
        return True

    for it in range(1, cfg.max_ecm_iters + 1):
        table, stash = _e_step_with_distances(scans, poses, model, cfg, selected)
        if pending is not None:
            # Current poses/model are the pending iterate's output; the
            # fresh distances price its objective.
            record, ptable, before_poses, before_model = pending
            pending = None
            if not accept(record, _objective_from_stash(stash, model, ptable)):
                trace.stop_reason = "objective stalled"
                return before_poses, before_model, trace
            if record.max_twist_update < cfg.pose_tol:
                trace.stop_reason = "pose update below tolerance"
                return poses, model, trace
        vms = reduce_virtual(table, scans)
        kappa = float("nan")
        if guard is not None:
            kappa = guard(poses, model, vms)
        new_poses = m_step_poses(vms, model, poses, cfg)
        new_model = gmm_map.update_landmarks(model, scans, new_poses, table)
        update = max(relative_twist(n, o).norm() for n, o in zip(new_poses, poses))
        record = IterationRecord(
            iteration=it,
            objective=float("nan"),
            max_twist_update=update,
            layer_point_counts=table.layer_point_counts(),
            kappa=kappa,
        )
        pending = (record, table, poses, model)
        poses, model = new_poses, new_model

    trace.stop_reason = "iteration limit"
    if pending is not None:
        record, ptable, before_poses, before_model = pending
        if not accept(record, objective(scans, poses, model, ptable)):
            trace.stop_reason = "objective stalled"
            return before_poses, before_model, trace
    return poses, model, trace
