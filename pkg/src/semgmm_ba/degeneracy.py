"""Degeneracy detection and adaptive semantic label selection.

The reduced problem is linearized at the prior poses; the condition number
of the stacked whitened Jacobian decides whether the active label set
constrains all pose directions. While it does not, untried labels are
drawn at random (seeded, without replacement) and kept only when they
strictly decrease the condition number.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .em_solver import (
    VirtualMeasurementSet,
    _vm_params,
    assemble_system,
    e_step,
    reduce_virtual,
)

log = logging.getLogger(__name__)


class EmptySystemError(Exception):
    """No (scan, landmark) pair produced Jacobian rows."""


@dataclass(frozen=True)
class LinearSystem:
    """Whitened H, negated-residual b, and per-3-row-block provenance."""

    H: np.ndarray
    b: np.ndarray
    rows: list  # (scan position, label, component index) per 3-row block
    free_poses: list  # pose position per 6-column block

    @property
    def n_measurements(self) -> int:
        return len(self.rows)


@dataclass
class SelectionAttempt:
    attempt: int
    candidate_label: int
    kappa_before: float
    kappa_after: float
    accepted: bool


@dataclass
class SelectionState:
    active_set: tuple
    remaining: tuple
    kappa: float
    attempts: int
    rng_seed: object
    degenerate: bool
    trace: list = field(default_factory=list)

    def trace_csv_rows(self) -> list:
        rows = [("attempt", "candidate_label", "kappa_before", "kappa_after", "accepted")]
        for a in self.trace:
            rows.append(
                (
                    a.attempt,
                    a.candidate_label,
                    f"{a.kappa_before:.17g}",
                    f"{a.kappa_after:.17g}",
                    int(a.accepted),
                )
            )
        return rows


def build_jacobian(vms: VirtualMeasurementSet, model, priors, free_mask, labels) -> LinearSystem:
    """Linearize the reduced problem at the given poses.

    Each retained virtual measurement contributes three whitened rows
    sqrt(beta) * Sigma^(-1/2) * [-skew(R w) | I] in its pose's columns
    (rotation error first), and b the whitened negated residual.
    """
    labels = set(labels)
    if not labels:
        raise ValueError("label set is empty")
    free = [k for k, f in enumerate(free_mask) if f]
    if not free:
        raise ValueError("no free pose")

    in_labels = np.isin(vms.labels, sorted(labels))
    if not in_labels.any():
        raise EmptySystemError("no virtual measurement carries a label from the set")
    sub = VirtualMeasurementSet(
        scan_idx=vms.scan_idx[in_labels],
        labels=vms.labels[in_labels],
        comp_idx=vms.comp_idx[in_labels],
        w=vms.w[in_labels],
        beta=vms.beta[in_labels],
    )
    mus, inv_sqrts = _vm_params(sub, model)
    H, b, kept = assemble_system(sub, mus, inv_sqrts, priors, free)
    if len(kept) == 0:
        raise EmptySystemError("no virtual measurement on a free pose for the label set")
    rows = [
        (int(sub.scan_idx[m]), int(sub.labels[m]), int(sub.comp_idx[m])) for m in kept
    ]
    return LinearSystem(H=H, b=b, rows=rows, free_poses=free)


def condition_number(H: np.ndarray) -> float:
    """sigma_max / sigma_min over the singular values of H.

    Returns infinity for column-rank-deficient systems (including fewer
    rows than columns) and whenever sigma_min < 1e-12 * sigma_max.
    """
    H = np.asarray(H, dtype=float)
    if H.size == 0:
        raise ValueError("condition_number of an empty matrix")
    svals = np.linalg.svd(H, compute_uv=False)
    smax = float(svals[0])
    smin = 0.0 if H.shape[0] < H.shape[1] else float(svals[-1])
    if smax == 0.0 or smin < 1e-12 * smax:
        return float("inf")
    return smax / smin


def _kappa_for_labels(scans, priors, model, labels, ecm_cfg, free_mask) -> float:
    """Condition number of the system built from an E-step on given labels."""
    present = [s for s in labels if s in model.layers]
    if not present:
        return float("inf")
    table = e_step(scans, priors, model, ecm_cfg, present)
    vms = reduce_virtual(table, scans)
    try:
        system = build_jacobian(vms, model, priors, free_mask, present)
    except EmptySystemError:
        return float("inf")
    return condition_number(system.H)


def adaptive_select(scans, priors, model, label_map, cfg) -> SelectionState:
    """Grow the active label set until the problem is well-conditioned.

    Starts from the configured initial set intersected with the labels
    actually present; if the condition number is at or above the threshold,
    up to ``max_label_draws`` labels are drawn uniformly (seeded, without
    replacement) from the remaining set, each kept only if it strictly
    decreases the condition number. A state with ``degenerate=True`` is
    returned when the threshold is never reached.

    ``cfg`` must provide s_ini (names), kappa_threshold, max_label_draws,
    rng_seed and an ``ecm`` EcmConfig (see window_ba.WindowConfig).
    """
    available = sorted(model.layers)
    s_ini_ids = []
    for name in cfg.s_ini:
        try:
            s_ini_ids.append(label_map.id_of(name))
        except KeyError:
            raise ValueError(f"initial-set class {name!r} is not in the label map")
    active = [s for s in s_ini_ids if s in available]
    remaining = [s for s in available if s not in active]
    free_mask = [False] + [True] * (len(priors) - 1)

    kappa = (
        _kappa_for_labels(scans, priors, model, active, cfg.ecm, free_mask)
        if active
        else float("inf")
    )
    state = SelectionState(
        active_set=tuple(active),
        remaining=tuple(remaining),
        kappa=kappa,
        attempts=0,
        rng_seed=cfg.rng_seed,
        degenerate=False,
    )
    if kappa < cfg.kappa_threshold:
        return state

    rng = np.random.default_rng(cfg.rng_seed)
    untried = list(remaining)
    attempts = 0
    while attempts < cfg.max_label_draws and untried and kappa >= cfg.kappa_threshold:
        attempts += 1
        s = int(untried.pop(rng.integers(len(untried))))
        kappa_new = _kappa_for_labels(scans, priors, model, active + [s], cfg.ecm, free_mask)
        accepted = kappa_new < kappa
        state.trace.append(
            SelectionAttempt(
                attempt=attempts,
                candidate_label=s,
                kappa_before=kappa,
                kappa_after=kappa_new,
                accepted=accepted,
            )
        )
        if accepted:
            active.append(s)
            remaining.remove(s)
            kappa = kappa_new
        log.debug(
            "selection attempt %d: label %s %s (kappa %.3g)",
            attempts,
            s,
            "accepted" if accepted else "discarded",
            kappa,
        )

    state.active_set = tuple(active)
    state.remaining = tuple(remaining)
    state.kappa = kappa
    state.attempts = attempts
    state.degenerate = not kappa < cfg.kappa_threshold
    return state
