"""Command-line harness: training, evaluation, single-window forecasts, the
ablation matrix, the gradient-check gate, and initial-token decoding.

Every option can also come from a key-value config file (``--config``) whose
keys mirror the flag names (e.g. ``embed-dim=128``); explicit flags win.
Metric reports emitted by ``train`` and ``eval`` set wall_time_s to 0.0 so
repeated runs are byte-identical; real timings go to stdout and run_meta.json.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import metrics as metrics_mod
from . import mixer
from . import training
from .metrics import MetricsReport
from .slstm import BlockConfig


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input CSV path")
    p.add_argument("--dataset", choices=data_mod.DATASET_KINDS, default="generic")
    p.add_argument("--lookback", type=int, default=96)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--conv-width", type=int, choices=(0, 2, 4), default=0)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=2021)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None,
                   help="optional key=value file mirroring these flag names")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixcast")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_train_flags(sub.add_parser("train", help="train a model"))

    p = sub.add_parser("ablation", help="train one numbered ablation configuration")
    p.add_argument("--id", type=int, required=True, choices=range(1, 11))
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dataset", choices=data_mod.DATASET_KINDS, default="generic")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--report", required=True)

    p = sub.add_parser("forecast", help="emit one test window's X, Y, and forecast")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window-index", type=int, default=0)
    p.add_argument("--emit", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference acceptance gate")
    p.add_argument("--tiny", action="store_true", required=True)

    p = sub.add_parser("decode-token", help="decode the learned initial token")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--emit", required=True)

    return parser


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser,
                       argv: list[str]) -> None:
    """Fill options from the key=value file for flags absent from argv."""
    if getattr(args, "config", None) is None:
        return
    text = Path(args.config).read_text()
    file_opts = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit(f"{args.config}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        file_opts[key.strip()] = value.strip()

    explicit = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    casts = {"lookback": int, "horizon": int, "embed-dim": int, "blocks": int,
             "heads": int, "conv-width": int, "batch": int, "warmup": int,
             "epochs": int, "patience": int, "seed": int, "id": int,
             "window-index": int, "dropout": float, "lr": float}
    for key, value in file_opts.items():
        flag = f"--{key}"
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise SystemExit(f"{args.config}: unknown option {key!r}")
        if flag in explicit:
            continue  # flags take precedence
        setattr(args, dest, casts.get(key, str)(value))


def _prepare_data(path, kind, lookback, horizon):
    raw = data_mod.load_csv(path)
    split = data_mod.chronological_split(raw.length, kind)
    series, stats = data_mod.standardize(raw, split)
    splits = {
        which: data_mod.windows_for_split(series, split, which, lookback, horizon)
        for which in ("train", "val", "test")
    }
    return raw, series, split, splits


def _train_config_from_args(args) -> training.TrainConfig:
    return training.TrainConfig(
        batch_size=args.batch, lr_initial=args.lr, warmup_steps=args.warmup,
        max_epochs=args.epochs, patience=args.patience, seed=args.seed,
    )


def _mixer_config_from_args(args, num_variates: int) -> mixer.MixerConfig:
    block = BlockConfig(d_hidden=args.embed_dim, num_heads=args.heads,
                        conv_width=args.conv_width, dropout_rate=args.dropout)
    return mixer.MixerConfig(
        lookback=args.lookback, horizon=args.horizon, num_variates=num_variates,
        embed_dim=args.embed_dim, num_blocks=args.blocks, block=block,
    )


def _cmd_train(args, config_id: str = "full") -> int:
    raw, series, split, splits = _prepare_data(
        args.data, args.dataset, args.lookback, args.horizon)
    cfg = _mixer_config_from_args(args, raw.num_variates)
    if config_id != "full":
        cfg = mixer.build_ablation_config(int(config_id), cfg)
    params = mixer.init_mixer_params(cfg, np.random.default_rng(args.seed))
    train_cfg = _train_config_from_args(args)

    out_dir = Path(args.out)
    artifacts = training.fit(params, cfg, splits["train"], splits["val"], train_cfg,
                             out_dir, log_path=out_dir / "loss_log.jsonl")

    best, best_cfg, _ = mixer.load_checkpoint(artifacts.best_checkpoint)
    mixer.save_checkpoint(artifacts.best_checkpoint, best,
                          extra={"dataset_kind": args.dataset,
                                 "dataset_name": Path(args.data).stem,
                                 "seed": args.seed, "config_id": config_id,
                                 "epochs_trained": artifacts.epochs_trained})
    reports = []
    for which in ("val", "test"):
        pred, target = training.predict_dataset(best, best_cfg, splits[which])
        scores = metrics_mod.compute_metrics(pred, target)
        reports.append(MetricsReport(
            dataset=f"{Path(args.data).stem}/{which}", horizon=args.horizon,
            lookback=args.lookback, seed=args.seed,
            epochs_trained=artifacts.epochs_trained, wall_time_s=0.0,
            config_id=config_id, **scores))
    metrics_mod.emit_report(reports, out_dir / "report.jsonl")
    (out_dir / "run_meta.json").write_text(json.dumps(
        {"wall_time_s": artifacts.wall_time_s,
         "best_val_mae": artifacts.best_val_mae,
         "epochs_trained": artifacts.epochs_trained}, indent=2) + "\n")
    for r in reports:
        print(f"{r.dataset}: mse={r.mse:.6f} mae={r.mae:.6f} "
              f"rmse={r.rmse:.6f} mape={r.mape:.4f}")
    print(f"trained {artifacts.epochs_trained} epochs in "
          f"{artifacts.wall_time_s:.1f}s; best checkpoint: {artifacts.best_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    params, cfg, extra = mixer.load_checkpoint(args.checkpoint)
    _, _, _, splits = _prepare_data(
        args.data, args.dataset, cfg.lookback, cfg.horizon)
    ds = splits[args.split]
    pred, target = training.predict_dataset(params, cfg, ds)
    scores = metrics_mod.compute_metrics(pred, target)
    report = MetricsReport(
        dataset=f"{Path(args.data).stem}/{args.split}", horizon=cfg.horizon,
        lookback=cfg.lookback, seed=int(extra.get("seed", -1)),
        epochs_trained=int(extra.get("epochs_trained", 0)), wall_time_s=0.0,
        config_id=str(extra.get("config_id", "full")), **scores)
    metrics_mod.emit_report([report], args.report)
    print(f"{report.dataset}: mse={report.mse:.6f} mae={report.mae:.6f} "
          f"rmse={report.rmse:.6f} mape={report.mape:.4f}")
    return 0


def _cmd_forecast(args) -> int:
    params, cfg, extra = mixer.load_checkpoint(args.checkpoint)
    kind = extra.get("dataset_kind", "generic")
    _, _, _, splits = _prepare_data(args.data, kind, cfg.lookback, cfg.horizon)
    ds = splits["test"]
    x, y = ds.window(args.window_index)
    pred, _ = mixer.mixer_forward(params, cfg, x)
    metrics_mod.write_forecast_columns(args.emit, history=x, target=y,
                                       forecast=pred.data)
    print(f"wrote window {args.window_index} ({cfg.num_variates} variates, "
          f"T={cfg.lookback}, H={cfg.horizon}) to {args.emit}")
    return 0


def _cmd_gradcheck(args) -> int:
    result = gradcheck_mod.full_model_gradcheck()
    print(f"parameters checked: {result.num_params}")
    print(f"max gradient error: {result.max_error:.3e}")
    print(f"fraction below 1e-6: {result.frac_below_1e6:.4f}")
    print(f"runtime: {result.runtime_s:.1f}s")
    worst = sorted(result.per_group.items(), key=lambda kv: -kv[1])[:5]
    for name, err in worst:
        print(f"  {name}: {err:.3e}")
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


def _cmd_decode_token(args) -> int:
    params, cfg, _ = mixer.load_checkpoint(args.checkpoint)
    decoded = mixer.decode_init_token(params, cfg)
    metrics_mod.write_series_columns(args.emit,
                                     {"decoded_token": decoded.data.reshape(-1)})
    print(f"wrote decoded token series (H={cfg.horizon}) to {args.emit}")
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("train", "ablation"):
        _apply_config_file(args, parser, argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "ablation":
            return _cmd_train(args, config_id=str(args.id))
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "forecast":
            return _cmd_forecast(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "decode-token":
            return _cmd_decode_token(args)
    except (data_mod.DataError, mixer.ConfigError, ValueError, IndexError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
