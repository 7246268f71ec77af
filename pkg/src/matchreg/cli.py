"""Command-line front end.

Subcommands: ``gen`` (synthetic datasets), ``train``, ``register`` (one
pair), ``eval`` (batch metrics), ``ablate`` (normalization comparison), and
``probe-svd`` (gradient instability sweep). Config files are JSON with the
same keys as the flags; explicit flags win over file values, unknown keys
are rejected by name. Exit codes: 0 success, 1 runtime/IO failure, 2
usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, MatchregError
from .features import init_net_params, load_checkpoint, save_checkpoint
from .fileio import read_ply
from .matching import DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_MATCH_THRESHOLD
from .metrics import (
    DEFAULT_INLIER_THRESHOLD,
    DEFAULT_ROTATION_THRESHOLDS_DEG,
    DEFAULT_TRANSLATION_THRESHOLDS_M,
)
from .solver import RegisterOptions, register
from .supervision import svd_gradient_probe
from .synth import SHAPE_KINDS, SynthConfig, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, ablate, evaluate_dataset, train

NORMALIZATION_CHOICES = {
    "match-norm": "match_norm",
    "per-instance": "per_instance_norm",
    "none": "none",
}


def _load_config_file(path, allowed: dict):
    """JSON config with flag-name keys; unknown keys rejected by name."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}", key=key)
    return doc


def _merged(args, parser_defaults: dict, file_values: dict, key: str):
    """Flag wins when explicitly given, then file value, then default."""
    flag_val = getattr(args, key)
    if flag_val is not None:
        return flag_val
    if key in file_values:
        return file_values[key]
    return parser_defaults[key]


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

GEN_KEYS = {
    "count": int,
    "seed": int,
    "m": int,
    "n": int,
    "noise_sigma": float,
    "outlier_fraction": float,
    "outlier_bound": float,
    "rotation_max_deg": float,
    "scale_min": float,
    "scale_max": float,
    "shapes": str,
    "hpr_gamma": float,
    "translation_bound": float,
}

GEN_DEFAULTS = {
    "count": 100,
    "seed": 0,
    "m": 1024,
    "n": 768,
    "noise_sigma": 0.0,
    "outlier_fraction": 0.0,
    "outlier_bound": 0.1,
    "rotation_max_deg": None,
    "scale_min": 0.5,
    "scale_max": 2.0,
    "shapes": ",".join(SHAPE_KINDS),
    "hpr_gamma": 10.0,
    "translation_bound": 0.5,
}


def cmd_gen(args) -> int:
    file_values = _load_config_file(args.config, GEN_KEYS) if args.config else {}
    get = lambda key: _merged(args, GEN_DEFAULTS, file_values, key)
    count = int(get("count"))
    if count < 1:
        raise ConfigError("count must be >= 1", key="count")
    shapes_raw = get("shapes")
    shapes = tuple(s.strip() for s in shapes_raw.split(",") if s.strip())
    for s in shapes:
        if s not in SHAPE_KINDS:
            raise ConfigError(f"unknown value for key 'shapes': {s!r}", key="shapes")
    rot_max = get("rotation_max_deg")
    try:
        cfg = SynthConfig(
            m=int(get("m")),
            n=int(get("n")),
            noise_sigma=float(get("noise_sigma")),
            outlier_fraction=float(get("outlier_fraction")),
            outlier_bound=float(get("outlier_bound")),
            rotation_max_deg=None if rot_max is None else float(rot_max),
            scale_range=(float(get("scale_min")), float(get("scale_max"))),
            shapes=shapes,
            hpr_gamma=float(get("hpr_gamma")),
            translation_bound=float(get("translation_bound")),
            seed=int(get("seed")),
        )
    except ValueError as err:
        raise ConfigError(str(err))
    samples = generate_dataset(cfg, count)
    write_dataset(args.out, samples, cfg)
    print(f"wrote {count} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_KEYS = {
    "iterations": int,
    "learning_rate": float,
    "batch_size": int,
    "lam": float,
    "sinkhorn_iters": int,
    "eval_sinkhorn_iters": int,
    "normalization": str,
    "seed": int,
    "checkpoint_every": int,
    "gt_thresh": float,
    "alpha": float,
    "tau": float,
    "knn_k": int,
    "widths": str,
}

TRAIN_DEFAULTS = {
    "iterations": 2000,
    "learning_rate": 1e-3,
    "batch_size": 8,
    "lam": DEFAULT_LAMBDA,
    "sinkhorn_iters": 20,
    "eval_sinkhorn_iters": 50,
    "normalization": "match-norm",
    "seed": 0,
    "checkpoint_every": 200,
    "gt_thresh": DEFAULT_INLIER_THRESHOLD,
    "alpha": DEFAULT_ALPHA,
    "tau": DEFAULT_MATCH_THRESHOLD,
    "knn_k": 10,
    "widths": "32,64,64",
}


def _train_config_from(args, file_values) -> tuple[TrainConfig, int, tuple[int, ...]]:
    get = lambda key: _merged(args, TRAIN_DEFAULTS, file_values, key)
    norm_cli = get("normalization")
    if norm_cli not in NORMALIZATION_CHOICES:
        raise ConfigError(
            f"unknown value for key 'normalization': {norm_cli!r}", key="normalization"
        )
    widths = tuple(int(w) for w in str(get("widths")).split(",") if w.strip())
    try:
        cfg = TrainConfig(
            learning_rate=float(get("learning_rate")),
            batch_size=int(get("batch_size")),
            iterations=int(get("iterations")),
            lam=float(get("lam")),
            sinkhorn_iters=int(get("sinkhorn_iters")),
            eval_sinkhorn_iters=int(get("eval_sinkhorn_iters")),
            normalization=NORMALIZATION_CHOICES[norm_cli],
            seed=int(get("seed")),
            checkpoint_every=int(get("checkpoint_every")),
            gt_thresh=float(get("gt_thresh")),
            alpha=float(get("alpha")),
            tau=float(get("tau")),
        )
    except ValueError as err:
        raise ConfigError(str(err))
    return cfg, int(get("knn_k")), widths


def cmd_train(args) -> int:
    file_values = _load_config_file(args.config, TRAIN_KEYS) if args.config else {}
    cfg, knn_k, widths = _train_config_from(args, file_values)
    samples, _ = read_dataset(args.data)
    val = None
    if args.val_data:
        val, _ = read_dataset(args.val_data)
    params = init_net_params(np.random.default_rng(cfg.seed), widths=widths, knn_k=knn_k)
    params, log = train(cfg, samples, params, val_data=val, checkpoint_dir=args.checkpoint_dir)
    save_checkpoint(args.out_model, params, normalization=cfg.normalization)
    if args.log:
        log.write_jsonl(args.log)
    final = [r["loss"] for r in log.records if r["loss"] is not None]
    print(f"trained {cfg.iterations} iterations; final loss {final[-1]:.6f}")
    print(f"model written to {args.out_model}")
    return 0


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

def _register_options(args, normalization: str) -> RegisterOptions:
    return RegisterOptions(
        lam=args.lam,
        sinkhorn_iters=args.sinkhorn_iters,
        tau=args.tau,
        alpha=args.alpha,
        normalization=normalization,
        use_icp=args.icp,
    )


def cmd_register(args) -> int:
    params, normalization = load_checkpoint(args.model)
    source = read_ply(args.source)
    target = read_ply(args.target)
    result = register(params, source, target, _register_options(args, normalization))
    print(f"converged: {result.converged}")
    print(f"matches: {result.predicted_match_count}")
    print("rotation:")
    for row in result.pose.rotation:
        print("  " + " ".join(f"{v: .9f}" for v in row))
    print("translation: " + " ".join(f"{v: .9f}" for v in result.pose.translation))
    if args.icp:
        print(f"icp iterations: {result.icp_iterations_used}")
    if args.json_out:
        doc = {
            "pose": {
                "rotation": [[float(v) for v in row] for row in result.pose.rotation],
                "translation": [float(v) for v in result.pose.translation],
            },
            "matches": [[m.source, m.target, m.weight] for m in result.matches],
            "predicted_match_count": result.predicted_match_count,
            "converged": result.converged,
            "icp_iterations_used": result.icp_iterations_used,
        }
        Path(args.json_out).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _parse_thresholds(raw: str) -> tuple[list[str], list[float]]:
    keys = [tok.strip() for tok in raw.split(",") if tok.strip()]
    try:
        values = [float(tok) for tok in keys]
    except ValueError:
        raise ConfigError(f"bad threshold list {raw!r}")
    if not values:
        raise ConfigError("threshold list is empty")
    return keys, values


def cmd_eval(args) -> int:
    params, normalization = load_checkpoint(args.model)
    samples, _ = read_dataset(args.data)
    if not samples:
        raise ConfigError("dataset is empty")
    rot_keys, rot_thresholds = _parse_thresholds(args.rot_thresholds)
    trans_keys, trans_thresholds = _parse_thresholds(args.trans_thresholds)
    report = evaluate_dataset(
        params,
        samples,
        _register_options(args, normalization),
        rot_thresholds=rot_thresholds,
        trans_thresholds=trans_thresholds,
        inlier_thresh=args.inlier_thresh,
        oracle=args.oracle,
        rotation_keys=rot_keys,
        translation_keys=trans_keys,
    )
    print(f"samples: {report.sample_count}")
    print("rotation mAP:")
    for key, frac in zip(rot_keys, report.rotation_map.values()):
        print(f"  <= {key} deg: {frac:.4f}")
    print("translation mAP:")
    for key, frac in zip(trans_keys, report.translation_map.values()):
        print(f"  <= {key} m: {frac:.4f}")
    print(f"ADD pass rate: {report.add_rate:.4f}")
    print(f"mean predicted matches: {report.mean_pred_matches:.2f}")
    print(f"mean true inliers: {report.mean_true_inliers:.2f}")
    if args.json_out:
        report.write_json(args.json_out)
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    from dataclasses import replace

    file_values = _load_config_file(args.config, TRAIN_KEYS) if args.config else {}
    cfg, knn_k, widths = _train_config_from(args, file_values)
    for mode in (args.mode_a, args.mode_b):
        if mode not in NORMALIZATION_CHOICES:
            raise ConfigError(f"unknown normalization {mode!r}")
    cfg_a = replace(cfg, normalization=NORMALIZATION_CHOICES[args.mode_a])
    cfg_b = replace(cfg, normalization=NORMALIZATION_CHOICES[args.mode_b])
    train_samples, _ = read_dataset(args.data)
    holdout, _ = read_dataset(args.holdout)
    params = init_net_params(np.random.default_rng(cfg.seed), widths=widths, knn_k=knn_k)
    rot_keys, rot_thresholds = _parse_thresholds(args.rot_thresholds)
    _, trans_thresholds = _parse_thresholds(args.trans_thresholds)
    result = ablate(
        cfg_a, cfg_b, train_samples, holdout, params,
        rot_thresholds=rot_thresholds, trans_thresholds=trans_thresholds,
        inlier_thresh=args.inlier_thresh,
    )
    print(f"{'':24}{result.mode_a:>20}{result.mode_b:>20}")
    print(f"{'mean pred matches':24}{result.report_a.mean_pred_matches:>20.2f}{result.report_b.mean_pred_matches:>20.2f}")
    print(f"{'mean true inliers':24}{result.report_a.mean_true_inliers:>20.2f}{result.report_b.mean_true_inliers:>20.2f}")
    for key, thr in zip(rot_keys, rot_thresholds):
        fa = result.report_a.rotation_map[float(thr)]
        fb = result.report_b.rotation_map[float(thr)]
        print(f"{'rot mAP @ ' + key + ' deg':24}{fa:>20.4f}{fb:>20.4f}")
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps(result.to_json_dict(), sort_keys=True, indent=1) + "\n"
        )
    return 0


# ---------------------------------------------------------------------------
# probe-svd
# ---------------------------------------------------------------------------

def cmd_probe_svd(args) -> int:
    try:
        gaps = [float(tok) for tok in args.gaps.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad gaps list {args.gaps!r}")
    if not gaps:
        raise ConfigError("gaps list is empty")
    if any(g <= 0 for g in gaps):
        raise ConfigError("all gaps must be positive")
    print("sigma_gap\tgradient_magnitude")
    for gap in gaps:
        print(f"{gap}\t{svd_gradient_probe(gap)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchreg",
        description="Partial-to-whole point cloud registration for 6D object pose estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--count", type=int, default=None, help=f"number of pairs (default {GEN_DEFAULTS['count']})")
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--m", type=int, default=None, help="source cloud size (default 1024)")
    p.add_argument("--n", type=int, default=None, help="target cloud size (default 768)")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None, help="Gaussian noise sigma in meters (default 0)")
    p.add_argument("--outlier-fraction", dest="outlier_fraction", type=float, default=None, help="fraction of target points replaced by outliers (default 0)")
    p.add_argument("--outlier-bound", dest="outlier_bound", type=float, default=None, help="outlier box inflation in meters (default 0.1)")
    p.add_argument("--rotation-max-deg", dest="rotation_max_deg", type=float, default=None, help="limit rotations to this angle; omit for full SO(3)")
    p.add_argument("--scale-min", dest="scale_min", type=float, default=None, help="minimum object scale (default 0.5)")
    p.add_argument("--scale-max", dest="scale_max", type=float, default=None, help="maximum object scale (default 2.0)")
    p.add_argument("--shapes", default=None, help=f"comma list of shapes (default {GEN_DEFAULTS['shapes']})")
    p.add_argument("--hpr-gamma", dest="hpr_gamma", type=float, default=None, help="hidden-point-removal radius factor (default 10)")
    p.add_argument("--translation-bound", dest="translation_bound", type=float, default=None, help="uniform translation box half-width (default 0.5)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset", formatter_class=fmt)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out-model", required=True, help="output checkpoint path")
    p.add_argument("--val-data", help="validation dataset directory")
    p.add_argument("--checkpoint-dir", help="directory for periodic checkpoints")
    p.add_argument("--log", help="training log path (JSON lines)")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--iterations", type=int, default=None, help="training iterations (default 2000)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None, help="Adam learning rate (default 1e-3)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="samples per iteration (default 8)")
    p.add_argument("--lam", type=float, default=None, help="Sinkhorn regularization weight (default 0.5)")
    p.add_argument("--sinkhorn-iters", dest="sinkhorn_iters", type=int, default=None, help="Sinkhorn iterations during training (default 20)")
    p.add_argument("--eval-sinkhorn-iters", dest="eval_sinkhorn_iters", type=int, default=None, help="Sinkhorn iterations at evaluation (default 50)")
    p.add_argument("--normalization", choices=sorted(NORMALIZATION_CHOICES), default=None, help="feature normalization mode (default match-norm)")
    p.add_argument("--seed", type=int, default=None, help="training seed (default 0)")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None, help="iterations between checkpoints (default 200)")
    p.add_argument("--gt-thresh", dest="gt_thresh", type=float, default=None, help="supervision distance threshold (default 0.02)")
    p.add_argument("--alpha", type=float, default=None, help="outlier bin score (default 1)")
    p.add_argument("--tau", type=float, default=None, help="match confidence threshold (default 0.5)")
    p.add_argument("--knn-k", dest="knn_k", type=int, default=None, help="edge-feature neighborhood size (default 10)")
    p.add_argument("--widths", default=None, help="comma list of layer widths (default 32,64,64)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one source/target PLY pair", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--source", required=True, help="source PLY (full model cloud)")
    p.add_argument("--target", required=True, help="target PLY (observed cloud)")
    p.add_argument("--icp", action="store_true", help="refine the pose with ICP")
    p.add_argument("--json-out", dest="json_out", help="write the result as JSON")
    p.add_argument("--lam", type=float, default=DEFAULT_LAMBDA, help="Sinkhorn regularization weight")
    p.add_argument("--sinkhorn-iters", dest="sinkhorn_iters", type=int, default=50, help="Sinkhorn iterations")
    p.add_argument("--tau", type=float, default=DEFAULT_MATCH_THRESHOLD, help="match confidence threshold")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="outlier bin score")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="evaluate a model over a dataset", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--icp", action="store_true", help="refine poses with ICP")
    p.add_argument("--json-out", dest="json_out", help="write the metrics report as JSON")
    p.add_argument("--rot-thresholds", dest="rot_thresholds", default=",".join(str(t) for t in DEFAULT_ROTATION_THRESHOLDS_DEG), help="rotation thresholds in degrees")
    p.add_argument("--trans-thresholds", dest="trans_thresholds", default=",".join(str(t) for t in DEFAULT_TRANSLATION_THRESHOLDS_M), help="translation thresholds in meters")
    p.add_argument("--inlier-thresh", dest="inlier_thresh", type=float, default=DEFAULT_INLIER_THRESHOLD, help="true-inlier distance threshold")
    p.add_argument("--lam", type=float, default=DEFAULT_LAMBDA, help="Sinkhorn regularization weight")
    p.add_argument("--sinkhorn-iters", dest="sinkhorn_iters", type=int, default=50, help="Sinkhorn iterations")
    p.add_argument("--tau", type=float, default=DEFAULT_MATCH_THRESHOLD, help="match confidence threshold")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="outlier bin score")
    p.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare normalization modes head to head", formatter_class=fmt)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--holdout", required=True, help="held-out dataset directory")
    p.add_argument("--json-out", dest="json_out", help="write the comparison as JSON")
    p.add_argument("--mode-a", dest="mode_a", default="match-norm", help="first normalization mode")
    p.add_argument("--mode-b", dest="mode_b", default="per-instance", help="second normalization mode")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--iterations", type=int, default=None, help="training iterations (default 2000)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None, help="Adam learning rate (default 1e-3)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="samples per iteration (default 8)")
    p.add_argument("--lam", type=float, default=None, help="Sinkhorn regularization weight (default 0.5)")
    p.add_argument("--sinkhorn-iters", dest="sinkhorn_iters", type=int, default=None, help="Sinkhorn iterations during training (default 20)")
    p.add_argument("--eval-sinkhorn-iters", dest="eval_sinkhorn_iters", type=int, default=None, help="Sinkhorn iterations at evaluation (default 50)")
    p.add_argument("--normalization", choices=sorted(NORMALIZATION_CHOICES), default=None, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=None, help="training seed (default 0)")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None, help="iterations between validation passes (default 200)")
    p.add_argument("--gt-thresh", dest="gt_thresh", type=float, default=None, help="supervision distance threshold (default 0.02)")
    p.add_argument("--alpha", type=float, default=None, help="outlier bin score (default 1)")
    p.add_argument("--tau", type=float, default=None, help="match confidence threshold (default 0.5)")
    p.add_argument("--knn-k", dest="knn_k", type=int, default=None, help="edge-feature neighborhood size (default 10)")
    p.add_argument("--widths", default=None, help="comma list of layer widths (default 32,64,64)")
    p.add_argument("--rot-thresholds", dest="rot_thresholds", default=",".join(str(t) for t in DEFAULT_ROTATION_THRESHOLDS_DEG), help="rotation thresholds in degrees")
    p.add_argument("--trans-thresholds", dest="trans_thresholds", default=",".join(str(t) for t in DEFAULT_TRANSLATION_THRESHOLDS_M), help="translation thresholds in meters")
    p.add_argument("--inlier-thresh", dest="inlier_thresh", type=float, default=DEFAULT_INLIER_THRESHOLD, help="true-inlier distance threshold")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe-svd", help="gradient magnitude vs. singular value gap", formatter_class=fmt)
    p.add_argument("--gaps", default="1,0.1,0.01,0.001", help="comma list of singular value gaps")
    p.set_defaults(func=cmd_probe_svd)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (MatchregError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
