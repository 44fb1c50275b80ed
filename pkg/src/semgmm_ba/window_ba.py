"""Sliding-window orchestration over a full trajectory.

Keyframes are picked by motion gates, refined in consecutive non-overlapping
windows, and the in-between frames re-anchored to their preceding keyframe
so prior relative transforms are preserved. A window that is (or turns)
ill-conditioned returns its prior poses verbatim.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from . import cloud_io
from .degeneracy import (
    EmptySystemError,
    SelectionState,
    adaptive_select,
    build_jacobian,
    condition_number,
)
from .em_solver import DegeneracyAbort, DegenerateSolveError, EcmConfig, EcmTrace, ecm_iterate
from .geometry import compose, inverse, so3_log
from .gmm_map import InitializationError, init_from_voxels

log = logging.getLogger(__name__)

DEFAULT_S_INI = ("car", "road", "pole", "lane-marking", "trunk")
# Paper-style defaults: coarse voxels on the ground class, 3 m elsewhere.
DEFAULT_VOXEL_OVERRIDES = {"road": 6.0}

VERDICT_REFINED = "refined"
VERDICT_DEGENERATE = "degenerate-unchanged"


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 10
    keyframe_trans_gate: float = 0.5  # meters
    keyframe_rot_gate_deg: float = 5.0
    window_stride: int = 0  # 0 = non-overlapping (stride == window_size)
    kappa_threshold: float = 100.0
    max_label_draws: int = 6
    voxel_size_default: float = 3.0
    voxel_overrides: dict = field(default_factory=lambda: dict(DEFAULT_VOXEL_OVERRIDES))
    s_ini: tuple = DEFAULT_S_INI
    min_points_per_voxel: int = 6
    max_range: float = cloud_io.DEFAULT_MAX_RANGE
    rng_seed: object = 0
    ecm: EcmConfig = field(default_factory=EcmConfig)

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.keyframe_trans_gate <= 0 or self.keyframe_rot_gate_deg <= 0:
            raise ValueError("keyframe gates must be positive")

    @property
    def stride(self) -> int:
        return self.window_stride if self.window_stride > 0 else self.window_size

    def voxel_sizes_for(self, label_map: cloud_io.LabelMap) -> dict:
        sizes = {}
        for label_id in label_map.ids:
            name = label_map.name_of(label_id)
            sizes[label_id] = float(self.voxel_overrides.get(name, self.voxel_size_default))
        return sizes


_BOOL_FREE_KEYS = {
    "window_size": int,
    "keyframe_trans_gate": float,
    "keyframe_rot_gate_deg": float,
    "window_stride": int,
    "kappa_threshold": float,
    "max_label_draws": int,
    "voxel_size_default": float,
    "min_points_per_voxel": int,
    "max_range": float,
    "rng_seed": int,
}
_ECM_KEYS = {
    "max_ecm_iters": int,
    "pose_tol": float,
    "gate_radius_sigma": float,
    "inner_gn_iters": int,
}


def parse_config(text: str) -> WindowConfig:
    """key = value configuration; every field optional, '#' comments.

    Per-class voxel sizes are written as ``voxel_size.<class-name> = <m>``
    and the initial label set as ``s_ini = name,name,...``.
    """
    kwargs = {}
    ecm_kwargs = {}
    overrides = dict(DEFAULT_VOXEL_OVERRIDES)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _BOOL_FREE_KEYS:
            kwargs[key] = _BOOL_FREE_KEYS[key](value)
        elif key in _ECM_KEYS:
            ecm_kwargs[key] = _ECM_KEYS[key](value)
        elif key == "s_ini":
            kwargs["s_ini"] = tuple(n.strip() for n in value.split(",") if n.strip())
        elif key.startswith("voxel_size."):
            overrides[key.split(".", 1)[1]] = float(value)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    kwargs["voxel_overrides"] = overrides
    kwargs["ecm"] = EcmConfig(**ecm_kwargs)
    return WindowConfig(**kwargs)


def read_config(path) -> WindowConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


@dataclass
class WindowResult:
    poses: list
    verdict: str
    selection: SelectionState
    ecm_trace: EcmTrace
    cause: str = ""

    @property
    def refined(self) -> bool:
        return self.verdict == VERDICT_REFINED


def select_keyframes(poses, cfg: WindowConfig) -> list:
    """Greedy motion gating: keep a pose once it moved or turned enough."""
    if not poses:
        raise ValueError("no poses")
    rot_gate = np.deg2rad(cfg.keyframe_rot_gate_deg)
    keyframes = [0]
    for i in range(1, len(poses)):
        last = poses[keyframes[-1]]
        dt = float(np.linalg.norm(poses[i].translation - last.translation))
        dr = float(np.linalg.norm(so3_log(poses[i].rotation @ last.rotation.T)))
        if dt >= cfg.keyframe_trans_gate or dr >= rot_gate:
            keyframes.append(i)
    return keyframes


def run_window(scans, priors, label_map, cfg: WindowConfig, seed=None) -> WindowResult:
    """Algorithm for one batch: voxelize, select labels, iterate ECM.

    On any degeneracy (initial selection, mid-run condition check, or a
    rank-deficient solve) the prior poses are returned verbatim.
    """
    if len(scans) != len(priors):
        raise ValueError(f"{len(scans)} scans vs {len(priors)} priors")
    if len(scans) < 2:
        raise ValueError("a window needs at least 2 scans")
    wcfg = cfg if seed is None else dataclasses.replace(cfg, rng_seed=seed)
    empty_selection = SelectionState(
        active_set=(), remaining=(), kappa=float("inf"), attempts=0,
        rng_seed=wcfg.rng_seed, degenerate=True,
    )

    try:
        model = init_from_voxels(
            scans,
            priors,
            label_map,
            wcfg.voxel_sizes_for(label_map),
            wcfg.min_points_per_voxel,
        )
    except InitializationError as exc:
        log.warning("window degenerate: %s", exc)
        return WindowResult(list(priors), VERDICT_DEGENERATE, empty_selection, EcmTrace(), str(exc))

    selection = adaptive_select(scans, priors, model, label_map, wcfg)
    if selection.degenerate:
        log.info("window degenerate after selection (kappa %.3g)", selection.kappa)
        return WindowResult(
            list(priors), VERDICT_DEGENERATE, selection, EcmTrace(), "adaptive selection"
        )

    free_mask = [False] + [True] * (len(priors) - 1)

    def guard(poses, model_now, vms):
        # Re-check conditioning each iteration with the accepted label set,
        # linearized at the current estimate.
        try:
            system = build_jacobian(vms, model_now, poses, free_mask, selection.active_set)
        except EmptySystemError as exc:
            raise DegeneracyAbort(float("inf"), str(exc))
        kappa = condition_number(system.H)
        if kappa >= wcfg.kappa_threshold:
            raise DegeneracyAbort(kappa)
        return kappa

    try:
        poses, _, trace = ecm_iterate(
            scans, priors, model, wcfg.ecm, selection.active_set, guard=guard
        )
    except (DegeneracyAbort, DegenerateSolveError) as exc:
        log.warning("window degenerate mid-run: %s", exc)
        return WindowResult(list(priors), VERDICT_DEGENERATE, selection, EcmTrace(), str(exc))
    return WindowResult(poses, VERDICT_REFINED, selection, trace)


@dataclass
class SequenceResult:
    poses: list
    keyframes: list
    windows: list  # (window_index, keyframe slice, WindowResult)
    report: dict


def refine_sequence(scans, priors, label_map, cfg: WindowConfig) -> SequenceResult:
    """Refine keyframe windows and re-anchor the remaining poses."""
    if len(scans) != len(priors):
        raise ValueError(f"{len(scans)} scans vs {len(priors)} priors")
    keyframes = select_keyframes(priors, cfg)
    refined = list(priors)
    windows = []
    per_window = []
    n_degenerate = 0
    for wi, start in enumerate(range(0, len(keyframes), cfg.stride)):
        group = keyframes[start : start + cfg.window_size]
        if len(group) < 2:
            continue
        t0 = time.perf_counter()
        result = run_window(
            [scans[i] for i in group],
            [priors[i] for i in group],
            label_map,
            cfg,
            seed=(cfg.rng_seed, wi),
        )
        elapsed = time.perf_counter() - t0
        log.info(
            "window %d (scans %d..%d): %s in %.2f s",
            wi,
            group[0],
            group[-1],
            result.verdict,
            elapsed,
        )
        for idx, pose in zip(group, result.poses):
            refined[idx] = pose
        windows.append((wi, group, result))
        n_degenerate += int(not result.refined)
        per_window.append(
            {
                "window": wi,
                "first_scan": group[0],
                "last_scan": group[-1],
                "n_keyframes": len(group),
                "verdict": result.verdict,
                "kappa": _json_float(result.selection.kappa),
                "selected_labels": list(result.selection.active_set),
                "label_draws": result.selection.attempts,
                "ecm_iterations": len(result.ecm_trace.iterations),
                "cause": result.cause,
            }
        )

    # Non-keyframes follow the correction of their preceding keyframe.
    kf_set = set(keyframes)
    for m in range(len(refined)):
        if m in kf_set:
            continue
        k = keyframes[bisect_right(keyframes, m) - 1]
        rel = compose(inverse(priors[k]), priors[m])
        refined[m] = compose(refined[k], rel)

    report = {
        "schema": 1,
        "n_scans": len(scans),
        "n_keyframes": len(keyframes),
        "n_windows": len(windows),
        "n_degenerate": n_degenerate,
        "per_window": per_window,
    }
    return SequenceResult(poses=refined, keyframes=keyframes, windows=windows, report=report)


def _json_float(x: float):
    # JSON has no Infinity; the report stores it as a string marker.
    if np.isfinite(x):
        return float(x)
    return "inf"


def run_sequence(scan_paths, label_paths, priors, label_map, cfg: WindowConfig) -> SequenceResult:
    """File-driven entry: loads every scan/label pair, then refines.

    Any unreadable file aborts before any window runs.
    """
    if len(scan_paths) != len(label_paths):
        raise ValueError(f"{len(scan_paths)} scan files vs {len(label_paths)} label files")
    if len(scan_paths) != len(priors):
        raise ValueError(f"{len(scan_paths)} scan files vs {len(priors)} prior poses")
    scans = []
    for i, (sp, lp) in enumerate(zip(scan_paths, label_paths)):
        scan = cloud_io.read_scan(sp, index=i, max_range=cfg.max_range)
        scans.append(cloud_io.read_labels(lp, scan))
    return refine_sequence(scans, priors, label_map, cfg)
