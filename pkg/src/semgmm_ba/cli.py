"""Command-line entry point: refine / simulate / evaluate / inspect-gmm."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cloud_io, evaluation, gmm_map, synth, window_ba

log = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semgmm-ba",
        description="Sliding-window LiDAR bundle adjustment on semantic Gaussian-mixture maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", help="refine a prior trajectory against its scans")
    p.add_argument("--scans", required=True, help="directory of *.bin scan files")
    p.add_argument("--labels", required=True, help="directory of *.label files")
    p.add_argument("--priors", required=True, help="prior trajectory (12 reals per line)")
    p.add_argument("--label-map", required=True, help="label map text file")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="override the configured rng seed")
    p.add_argument("--output", default="refined_poses.txt", help="refined trajectory path")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--ecm-trace", help="write per-window ECM iteration trace CSV here")
    p.add_argument("--selection-trace", help="write per-window label selection trace CSV here")

    p = sub.add_parser("simulate", help="write a synthetic benchmark dataset")
    p.add_argument("--scene", required=True, choices=synth.BENCHMARK_SCENES)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--noise", type=float, default=synth.DEFAULT_NOISE_SIGMA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-range", type=float, default=35.0)
    p.add_argument("--perturb-trans", type=float, default=0.0, help="prior translation noise, m")
    p.add_argument("--perturb-rot-deg", type=float, default=0.0, help="prior rotation noise, deg")

    p = sub.add_parser("evaluate", help="ATE RMSE between two trajectories")
    p.add_argument("estimate")
    p.add_argument("truth")
    p.add_argument("--align", choices=("rigid", "none"), default="rigid")
    p.add_argument("--json", dest="json_out", help="write the report as JSON here")

    p = sub.add_parser("inspect-gmm", help="dump the voxel-initialized mixture of a dataset")
    p.add_argument("--scans", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--label-map", required=True)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", required=True, help="output prefix (.json and .ply are appended)")
    return parser


def _dataset_files(scan_dir, label_dir):
    scans = sorted(Path(scan_dir).glob("*.bin"))
    labels = sorted(Path(label_dir).glob("*.label"))
    if not scans:
        raise FileNotFoundError(f"no *.bin files in {scan_dir}")
    if len(scans) != len(labels):
        raise ValueError(f"{len(scans)} scan files vs {len(labels)} label files")
    return scans, labels


def _load_config(path, seed) -> window_ba.WindowConfig:
    cfg = window_ba.read_config(path) if path else window_ba.WindowConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, rng_seed=seed)
    return cfg


def _write_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        csv.writer(f).writerows(rows)


def _cmd_refine(args) -> int:
    cfg = _load_config(args.config, args.seed)
    label_map = cloud_io.read_label_map(args.label_map)
    priors = cloud_io.read_poses(args.priors)
    scan_paths, label_paths = _dataset_files(args.scans, args.labels)
    result = window_ba.run_sequence(scan_paths, label_paths, priors, label_map, cfg)

    cloud_io.write_poses(args.output, result.poses)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(result.report, f, indent=2, sort_keys=True)
            f.write("\n")
    if args.ecm_trace:
        rows = [("window",) + ("iter", "objective", "max_twist_norm", "layer_point_counts")]
        for wi, _, wres in result.windows:
            rows.extend((wi,) + tuple(r) for r in wres.ecm_trace.csv_rows()[1:])
        _write_csv(args.ecm_trace, rows)
    if args.selection_trace:
        rows = [
            ("window",)
            + ("attempt", "candidate_label", "kappa_before", "kappa_after", "accepted")
        ]
        for wi, _, wres in result.windows:
            rows.extend((wi,) + tuple(r) for r in wres.selection.trace_csv_rows()[1:])
        _write_csv(args.selection_trace, rows)

    rep = result.report
    print(
        f"refined {rep['n_windows']} windows over {rep['n_keyframes']} keyframes "
        f"({rep['n_degenerate']} degenerate); trajectory written to {args.output}"
    )
    return 0


def _cmd_simulate(args) -> int:
    out = Path(args.out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    scene, truth = synth.make_benchmark_scene(args.scene, n_frames=args.frames)
    scanner = synth.SimulatedScanner(
        max_range=args.max_range, noise_sigma=args.noise, rng_seed=args.seed
    )
    for i, pose in enumerate(truth):
        scan = synth.render_scan(scene, pose, scanner, index=i)
        cloud_io.write_scan(out / "scans" / f"{i:06d}.bin", scan)
        cloud_io.write_labels(out / "labels" / f"{i:06d}.label", scan)
    priors = synth.perturb_trajectory(
        truth, args.perturb_trans, float(np.deg2rad(args.perturb_rot_deg)), seed=args.seed + 1
    )
    cloud_io.write_poses(out / "groundtruth.txt", truth)
    cloud_io.write_poses(out / "priors.txt", priors)
    cloud_io.write_label_map(out / "labelmap.txt", cloud_io.default_label_map())
    print(f"wrote {len(truth)} frames of scene '{args.scene}' to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    estimate = cloud_io.read_poses(args.estimate)
    truth = cloud_io.read_poses(args.truth)
    report = evaluation.ate_rmse(estimate, truth, align=args.align)
    print(f"ATE RMSE: {report.rmse:.6f} m over {len(report.per_pose_errors)} poses "
          f"(alignment: {report.alignment})")
    if args.json_out:
        doc = {
            "schema": 1,
            "ate_rmse": report.rmse,
            "alignment": report.alignment,
            "n_poses": len(report.per_pose_errors),
            "per_pose_errors": [float(e) for e in report.per_pose_errors],
        }
        with open(args.json_out, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def _cmd_inspect_gmm(args) -> int:
    cfg = _load_config(args.config, None)
    label_map = cloud_io.read_label_map(args.label_map)
    poses = cloud_io.read_poses(args.poses)
    scan_paths, label_paths = _dataset_files(args.scans, args.labels)
    if len(scan_paths) != len(poses):
        raise ValueError(f"{len(scan_paths)} scan files vs {len(poses)} poses")
    scans = []
    for i, (sp, lp) in enumerate(zip(scan_paths, label_paths)):
        scans.append(cloud_io.read_labels(lp, cloud_io.read_scan(sp, index=i, max_range=cfg.max_range)))
    model = gmm_map.init_from_voxels(
        scans, poses, label_map, cfg.voxel_sizes_for(label_map), cfg.min_points_per_voxel
    )
    gmm_map.write_gmm_json(f"{args.out}.json", model)
    gmm_map.write_gmm_ply(f"{args.out}.ply", model)
    print(
        f"mixture: {model.n_layers} layers, {model.total_components} components; "
        f"wrote {args.out}.json and {args.out}.ply"
    )
    return 0


_COMMANDS = {
    "refine": _cmd_refine,
    "simulate": _cmd_simulate,
    "evaluate": _cmd_evaluate,
    "inspect-gmm": _cmd_inspect_gmm,
}


def cli_main(argv) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse prints its own usage/errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
