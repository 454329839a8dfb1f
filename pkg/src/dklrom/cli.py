"""Command-line entry point: dataset generation, training, evaluation, and
weight grid search as reproducible runs.

Every command resolves its configuration (config file first, flags win),
writes a run manifest into the output directory BEFORE any long computation,
and uses exit codes 0 (success), 1 (runtime failure), 2 (usage or config
error). DKLROM_OUTPUT_ROOT sets the default output root; an explicit --out
always takes precedence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_dataset, save_dataset
from .errors import (
    CheckpointError,
    ConfigurationError,
    FormatError,
    IntegrationError,
    NumericalError,
    ValidationError,
)
from .evaluation import (
    evaluate_reconstruction,
    latent_projection,
    rollout_compare,
    uncertainty_heatmaps,
    write_metrics_csv,
    write_summary,
)
from .simulators import SYSTEMS, GenerateConfig, generate_dataset
from .training import TrainConfig, grid_search_weights, load_checkpoint, train

DEFAULT_NOISE_LEVELS = (0.0, 0.0625, 0.25)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_out(flag_value, default_name: str) -> Path:
    if flag_value:
        return Path(flag_value)
    root = os.environ.get("DKLROM_OUTPUT_ROOT", ".")
    return Path(root) / default_name


def _write_run_manifest(out_dir: Path, command: str, argv, config: dict,
                        seeds: dict, inputs: dict, outputs: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
        "started_at": _utc_now(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _require_dir(path_value, what: str) -> Path:
    path = Path(path_value)
    if not path.is_dir():
        raise ConfigurationError(f"{what} not found: {path}")
    return path


def _load_config_file(path_value) -> dict:
    if path_value is None:
        return {}
    path = Path(path_value)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file is not valid json: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a json object")
    return data


_TRAIN_FLAG_FIELDS = (
    ("latent_dim", "latent_dim"),
    ("history", "history_len"),
    ("feature_dim", "feature_dim"),
    ("n_inducing", "n_inducing"),
    ("lstm_hidden", "lstm_hidden"),
    ("batch_size", "batch_size"),
    ("lr_net", "lr_net"),
    ("lr_gp", "lr_gp"),
    ("steps", "max_steps"),
    ("noise", "noise_sigma2"),
    ("grad_clip", "grad_clip"),
    ("eval_interval", "eval_interval"),
    ("seed", "seed"),
    ("deterministic", "deterministic"),
)


def _resolve_train_config(args) -> TrainConfig:
    """Config file fields first, explicit flags override."""
    data = _load_config_file(getattr(args, "config", None))
    for attr, field_name in _TRAIN_FLAG_FIELDS:
        value = getattr(args, attr, None)
        if value is not None:
            data[field_name] = value
    weights = dict(data.get("weights") or {})
    if getattr(args, "w_reg", None) is not None:
        weights["w_reg"] = args.w_reg
    if getattr(args, "w_var", None) is not None:
        weights["w_var"] = args.w_var
    if getattr(args, "t_steps", None) is not None:
        weights["horizon"] = args.t_steps
    if weights:
        data["weights"] = weights
    return TrainConfig.from_dict(data)


def cmd_generate(args) -> int:
    beta_range = (args.beta_min, args.beta_max)
    config = GenerateConfig(
        system=args.system, n_traj=args.m, n_frames=args.n, seed=args.seed,
        render_size=args.render_size, steps_per_frame=args.steps_per_frame,
        save_every=args.save_every, beta_range=beta_range,
    )
    out_dir = _resolve_out(args.out, f"dataset_{args.system}_seed{args.seed}")
    _write_run_manifest(
        out_dir, "generate", args.raw_argv, asdict(config),
        seeds={"seed": config.seed}, inputs={}, outputs={"dataset": out_dir},
    )
    dataset = generate_dataset(config)
    save_dataset(dataset, out_dir)
    print(f"wrote {dataset.n_traj}x{dataset.n_frames} {args.system} dataset to {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    dataset_dir = _require_dir(args.dataset, "dataset directory")
    dataset = load_dataset(dataset_dir)
    model_config = config.model_config(dataset)  # validates compatibility
    if dataset.n_frames < config.history_len + config.weights.horizon:
        raise ConfigurationError(
            f"dataset frames per trajectory ({dataset.n_frames}) cannot fit "
            f"history_len + horizon = {config.history_len + config.weights.horizon}"
        )
    if args.dry_run:
        print(json.dumps({"config": config.to_dict(),
                          "model_config": model_config.to_dict(),
                          "fingerprint": model_config.fingerprint()}, indent=2))
        return 0
    out_dir = _resolve_out(args.out, f"train_{dataset.meta.get('system', 'run')}_seed{config.seed}")
    _write_run_manifest(
        out_dir, "train", args.raw_argv, config.to_dict(),
        seeds={"seed": config.seed}, inputs={"dataset": dataset_dir},
        outputs={"checkpoints": out_dir / "checkpoints",
                 "log": out_dir / "train_log.json"},
    )

    def report(snap: dict) -> None:
        print(f"step {snap['step']}: total={snap['mean_total']:.5f} "
              f"recon={snap['mean_recon']:.5f} reg={snap['mean_reg']:.5f} "
              f"recon_next={snap['mean_recon_next']:.5f} vi={snap['mean_vi']:.5f}")

    bundle, log = train(config, dataset, checkpoint_dir=out_dir / "checkpoints",
                        progress=report)
    log.save(out_dir / "train_log.json")
    print(f"finished {config.max_steps} steps in {log.wall_clock_s:.1f}s; "
          f"checkpoint at {out_dir / 'checkpoints' / 'final'}")
    return 0


def cmd_eval(args) -> int:
    checkpoint_dir = _require_dir(args.checkpoint, "checkpoint directory")
    dataset_dir = _require_dir(args.dataset, "dataset directory")
    bundle, ck_manifest = load_checkpoint(checkpoint_dir)
    dataset = load_dataset(dataset_dir)
    cfg = bundle.config
    if (tuple(dataset.frame_shape) != tuple(cfg.frame_shape)
            or dataset.control_dim != cfg.control_dim
            or dataset.param_dim != cfg.param_dim):
        raise CheckpointError(
            f"checkpoint expects frames {cfg.frame_shape}, controls "
            f"{cfg.control_dim}, params {cfg.param_dim}; dataset has "
            f"{dataset.frame_shape}, {dataset.control_dim}, {dataset.param_dim}"
        )
    noise_levels = args.noise if args.noise else list(DEFAULT_NOISE_LEVELS)
    history_lens = args.history if args.history else [cfg.history_len]
    horizon = int((ck_manifest.get("loss_weights") or {}).get("horizon", 0))
    n_steps = args.rollout_steps
    if n_steps is None:
        n_steps = max(1, min(60, dataset.n_frames - cfg.history_len))

    out_dir = _resolve_out(args.out, f"eval_{dataset.meta.get('system', 'run')}_seed{args.seed}")
    _write_run_manifest(
        out_dir, "eval", args.raw_argv,
        {"noise_levels": noise_levels, "history_lens": history_lens,
         "n_windows": args.windows, "rollout_steps": n_steps,
         "n_rollouts": args.n_rollouts, "traj_index": args.traj_index,
         "psnr_literal_sum": bool(args.psnr_literal_sum), "seed": args.seed},
        seeds={"seed": args.seed}, inputs={"checkpoint": checkpoint_dir,
                                           "dataset": dataset_dir},
        outputs={"report": out_dir},
    )
    rng = np.random.default_rng(args.seed)

    rows = evaluate_reconstruction(
        bundle, dataset, history_lens, noise_levels, rng,
        n_windows=args.windows, horizon=horizon,
        literal_sum=bool(args.psnr_literal_sum),
    )
    write_metrics_csv(rows, out_dir / "metrics.csv")

    comparison = rollout_compare(
        bundle, dataset, rng, traj_index=args.traj_index, n_steps=n_steps,
        noise_sigma2=noise_levels[0], out_path=out_dir / "rollout_strip.png",
    )
    maps = uncertainty_heatmaps(
        bundle, dataset, noise_levels, rng, traj_index=args.traj_index,
        n_rollouts=args.n_rollouts, n_steps=n_steps, out_dir=out_dir,
    )
    tsne_info: dict
    try:
        projection = latent_projection(bundle, dataset, rng,
                                       color_by=args.color_by, seed=args.seed,
                                       out_path=out_dir / "tsne.png")
        tsne_info = {"png": projection.png_path,
                     "points": int(projection.embedding.shape[0]),
                     "color_label": projection.color_label}
    except ValidationError as exc:
        print(f"warning: skipping latent projection ({exc})", file=sys.stderr)
        tsne_info = {"skipped": str(exc)}

    write_summary(out_dir / "summary.json", {
        "metric_rows": [asdict(r) for r in rows],
        "rollout": {"noise_sigma2": comparison.noise_sigma2,
                    "l1": comparison.l1.tolist(),
                    "psnr_db": comparison.psnr_db.tolist(),
                    "png": comparison.png_path},
        "uncertainty": [{"noise_sigma2": m.noise_sigma2,
                         "mean_std": m.mean_std, "png": m.png_path}
                        for m in maps],
        "tsne": tsne_info,
    })
    print(f"report written to {out_dir}")
    return 0


def cmd_gridsearch(args) -> int:
    config = _resolve_train_config(args)
    dataset_dir = _require_dir(args.dataset, "dataset directory")
    dataset = load_dataset(dataset_dir)
    w_reg_values = args.w_reg_grid if args.w_reg_grid else [0.5, 1.0, 2.0]
    w_var_values = args.w_var_grid if args.w_var_grid else [1e-3, 1e-2]
    out_dir = _resolve_out(args.out, f"gridsearch_seed{config.seed}")
    _write_run_manifest(
        out_dir, "gridsearch", args.raw_argv,
        {"train": config.to_dict(), "w_reg": w_reg_values, "w_var": w_var_values,
         "test_fraction": args.test_fraction},
        seeds={"seed": config.seed}, inputs={"dataset": dataset_dir},
        outputs={"rows": out_dir / "grid_rows.csv", "best": out_dir / "best.json"},
    )

    def report(row: dict) -> None:
        print(f"w_reg={row['w_reg']:g} w_var={row['w_var']:g} "
              f"val_score={row['val_score']:.5f}")

    best, rows = grid_search_weights(config, dataset, w_reg_values, w_var_values,
                                     test_fraction=args.test_fraction,
                                     progress=report)
    import csv as _csv

    with open(out_dir / "grid_rows.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        columns = list(rows[0].keys())
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])
    (out_dir / "best.json").write_text(json.dumps(asdict(best), indent=2))
    print(f"best weights: w_reg={best.w_reg:g} w_var={best.w_var:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dklrom",
        description="Latent dynamics toolkit: generate data, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="simulate and render a dataset")
    gen.add_argument("--system", choices=SYSTEMS, required=True)
    gen.add_argument("--m", type=int, default=100, help="number of trajectories")
    gen.add_argument("--n", type=int, default=120, help="frames per trajectory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--render-size", type=int, default=84)
    gen.add_argument("--steps-per-frame", type=int, default=20)
    gen.add_argument("--save-every", type=int, default=10,
                     help="solver steps between saved frames (reaction_diffusion)")
    gen.add_argument("--beta-min", type=float, default=0.5)
    gen.add_argument("--beta-max", type=float, default=1.5)
    gen.add_argument("--out", default=None)
    gen.set_defaults(func=cmd_generate)

    def add_train_flags(p):
        p.add_argument("--config", default=None, help="json config file")
        p.add_argument("--latent-dim", type=int, default=None)
        p.add_argument("--history", type=int, default=None)
        p.add_argument("--t-steps", type=int, default=None,
                       help="multi-step loss horizon")
        p.add_argument("--feature-dim", type=int, default=None)
        p.add_argument("--n-inducing", type=int, default=None)
        p.add_argument("--lstm-hidden", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr-net", type=float, default=None)
        p.add_argument("--lr-gp", type=float, default=None)
        p.add_argument("--steps", type=int, default=None, help="training steps")
        p.add_argument("--noise", type=float, default=None,
                       help="training measurement noise variance")
        p.add_argument("--w-reg", type=float, default=None)
        p.add_argument("--w-var", type=float, default=None)
        p.add_argument("--grad-clip", type=float, default=None)
        p.add_argument("--eval-interval", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_const", const=True,
                       default=None, help="single-threaded deterministic mode")

    tr = sub.add_parser("train", help="train a model on a dataset")
    tr.add_argument("--dataset", required=True)
    add_train_flags(tr)
    tr.add_argument("--dry-run", action="store_true",
                    help="validate config and exit without training")
    tr.add_argument("--out", default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="write an evaluation report")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--noise", type=float, action="append", default=None,
                    help="noise variance level (repeatable)")
    ev.add_argument("--history", type=int, action="append", default=None,
                    help="history length to evaluate (repeatable)")
    ev.add_argument("--windows", type=int, default=50)
    ev.add_argument("--rollout-steps", type=int, default=None)
    ev.add_argument("--n-rollouts", type=int, default=30)
    ev.add_argument("--traj-index", type=int, default=0)
    ev.add_argument("--color-by", choices=("auto", "angle", "timestep"),
                    default="auto")
    ev.add_argument("--psnr-literal-sum", action="store_true")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    gs = sub.add_parser("gridsearch", help="grid search over loss weights")
    gs.add_argument("--dataset", required=True)
    add_train_flags(gs)
    gs.add_argument("--w-reg-grid", type=float, action="append", default=None,
                    help="w_reg grid value (repeatable)")
    gs.add_argument("--w-var-grid", type=float, action="append", default=None,
                    help="w_var grid value (repeatable)")
    gs.add_argument("--test-fraction", type=float, default=0.2)
    gs.add_argument("--out", default=None)
    gs.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv=None) -> int:
    raw_argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(raw_argv)
    args.raw_argv = raw_argv
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, FormatError, IntegrationError, NumericalError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
