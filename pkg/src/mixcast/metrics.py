"""Forecast metrics, experiment orchestration, and machine-readable reports.

Metrics are computed in standardized data space: MSE and MAE are means over
all N*V*H entries, RMSE is the square root of the MSE, and MAPE guards zero
targets with a small epsilon.  Reports are line-delimited JSON records with a
stable key order plus a plain-text comparison table, so two emissions of the
same reports are byte-identical.
"""

from __future__ import annotations

import json
import traceback
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import mixer
from . import training
from .mixer import MixerConfig, build_ablation_config, init_mixer_params
from .tensor import ShapeError

MAPE_EPS = 1e-8

_REPORT_FIELDS = ("dataset", "horizon", "lookback", "seed", "mse", "mae",
                  "rmse", "mape", "epochs_trained", "wall_time_s", "config_id")


@dataclass
class MetricsReport:
    dataset: str
    horizon: int
    lookback: int
    seed: int
    mse: float
    mae: float
    rmse: float
    mape: float
    epochs_trained: int
    wall_time_s: float
    config_id: str = "full"


def compute_metrics(pred: np.ndarray, target: np.ndarray) -> dict:
    """MSE / MAE / RMSE / MAPE over every entry of matching arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ShapeError("metrics need at least one entry")
    err = target - pred
    mse = float(np.mean(err ** 2))
    mae = float(np.mean(np.abs(err)))
    mape = float(100.0 * np.mean(np.abs(err) / (np.abs(target) + MAPE_EPS)))
    return {"mse": mse, "mae": mae, "rmse": float(np.sqrt(mse)), "mape": mape}


def report_record(report: MetricsReport) -> dict:
    """Dict with the stable field order used by every serialization."""
    values = asdict(report)
    return {key: values[key] for key in _REPORT_FIELDS}


def mean_rows(reports: list[MetricsReport]) -> list[dict]:
    """Arithmetic means across seeds per (dataset, horizon, config_id)."""
    groups: dict[tuple, list[MetricsReport]] = {}
    for r in reports:
        groups.setdefault((r.dataset, r.horizon, r.lookback, r.config_id), []).append(r)
    rows = []
    for (dataset, horizon, lookback, config_id), members in groups.items():
        row = {"dataset": dataset, "horizon": horizon, "lookback": lookback,
               "seed": "mean"}
        for metric in ("mse", "mae", "rmse", "mape"):
            row[metric] = float(np.mean([getattr(m, metric) for m in members]))
        row["epochs_trained"] = float(np.mean([m.epochs_trained for m in members]))
        row["wall_time_s"] = float(np.mean([m.wall_time_s for m in members]))
        row["config_id"] = config_id
        rows.append(row)
    return rows


def _format_table(records: list[dict]) -> str:
    headers = list(_REPORT_FIELDS)
    rows = [[_cell(rec[h]) for h in headers] for rec in records]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def emit_report(reports: list[MetricsReport], path, forecast_samples=(),
                token_series=None) -> None:
    """Write the JSONL metrics document, a text table, and optional
    column-oriented numeric files for external plotting."""
    if not reports:
        raise ValueError("emit_report needs at least one report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [report_record(r) for r in reports]
    records += mean_rows(reports)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    table_path = path.with_suffix(".txt")
    table_path.write_text(_format_table(records))

    for i, sample in enumerate(forecast_samples):
        write_forecast_columns(path.with_name(f"{path.stem}_forecast{i}.csv"), **sample)
    if token_series is not None:
        write_series_columns(path.with_name(f"{path.stem}_token.csv"),
                             {"decoded_token": token_series})


def parse_report(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def write_forecast_columns(path, history: np.ndarray, target: np.ndarray,
                           forecast: np.ndarray) -> None:
    """One variate per file set is overkill; emit flat columns t, x, y, yhat.

    History occupies t < 0 rows with empty y/yhat cells; the forecast horizon
    occupies t >= 0 rows with an empty x cell."""
    history = np.asarray(history)
    target = np.asarray(target)
    forecast = np.asarray(forecast)
    lines = ["t,variate,x,y,yhat"]
    v, t_len = history.shape
    h_len = target.shape[1]
    for var in range(v):
        for t in range(t_len):
            lines.append(f"{t - t_len},{var},{float(history[var, t])!r},,")
        for t in range(h_len):
            lines.append(f"{t},{var},,{float(target[var, t])!r},"
                         f"{float(forecast[var, t])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_series_columns(path, columns: dict) -> None:
    keys = list(columns)
    arrays = [np.asarray(columns[k]).reshape(-1) for k in keys]
    n = max(a.size for a in arrays)
    lines = ["step," + ",".join(keys)]
    for i in range(n):
        cells = [repr(float(a[i])) if i < a.size else "" for a in arrays]
        lines.append(f"{i}," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ExperimentSpec:
    data_path: str
    dataset_kind: str
    dataset_name: str
    horizons: list[int]
    seeds: list[int]
    lookback: int
    mixer_overrides: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)
    config_id: str = "full"
    out_dir: str = "runs"

    def __post_init__(self):
        if not self.horizons or not self.seeds:
            raise ValueError("horizons and seeds must be non-empty")


def _build_config(spec: ExperimentSpec, horizon: int) -> MixerConfig:
    opts = dict(embed_dim=64, num_blocks=1, num_heads=4, conv_width=0,
                dropout_rate=0.1)
    opts.update(spec.mixer_overrides)
    block = mixer.BlockConfig(
        d_hidden=opts["embed_dim"],
        num_heads=opts["num_heads"],
        conv_width=opts["conv_width"],
        dropout_rate=opts["dropout_rate"],
    )
    cfg = MixerConfig(
        lookback=spec.lookback,
        horizon=horizon,
        num_variates=opts["num_variates"],
        embed_dim=opts["embed_dim"],
        num_blocks=opts["num_blocks"],
        block=block,
    )
    if spec.config_id != "full":
        cfg = build_ablation_config(int(spec.config_id), cfg)
    return cfg


def run_experiment(spec: ExperimentSpec) -> tuple[list[MetricsReport], list[dict]]:
    """Train and evaluate every (horizon, seed) pair; failures are summarized
    per run and do not discard completed results."""
    raw = data_mod.load_csv(spec.data_path)
    split = data_mod.chronological_split(raw.length, spec.dataset_kind)
    series, _ = data_mod.standardize(raw, split)
    spec.mixer_overrides.setdefault("num_variates", raw.num_variates)

    out_dir = Path(spec.out_dir)
    reports: list[MetricsReport] = []
    failures: list[dict] = []
    for horizon in spec.horizons:
        try:
            train_ds = data_mod.windows_for_split(series, split, "train",
                                                  spec.lookback, horizon)
            val_ds = data_mod.windows_for_split(series, split, "val",
                                                spec.lookback, horizon)
            test_ds = data_mod.windows_for_split(series, split, "test",
                                                 spec.lookback, horizon)
        except Exception as exc:  # noqa: BLE001 - summarized per run
            failures.extend({
                "horizon": horizon,
                "seed": seed,
                "error": f"{type(exc).__name__}: {exc}",
                "trace": traceback.format_exc(limit=4),
            } for seed in spec.seeds)
            continue
        for seed in spec.seeds:
            run_dir = out_dir / f"h{horizon}_s{seed}"
            try:
                train_cfg = training.TrainConfig(seed=seed, **spec.train_overrides)
                cfg = _build_config(spec, horizon)
                params = init_mixer_params(cfg, np.random.default_rng(seed))
                artifacts = training.fit(params, cfg, train_ds, val_ds, train_cfg,
                                         run_dir, log_path=run_dir / "loss_log.jsonl")
                best, best_cfg, _ = mixer.load_checkpoint(artifacts.best_checkpoint)
                pred, target = training.predict_dataset(best, best_cfg, test_ds)
                scores = compute_metrics(pred, target)
                reports.append(MetricsReport(
                    dataset=spec.dataset_name, horizon=horizon, lookback=spec.lookback,
                    seed=seed, epochs_trained=artifacts.epochs_trained,
                    wall_time_s=artifacts.wall_time_s, config_id=spec.config_id,
                    **scores))
            except Exception as exc:  # noqa: BLE001 - preserve partial results
                failures.append({
                    "horizon": horizon,
                    "seed": seed,
                    "error": f"{type(exc).__name__}: {exc}",
                    "trace": traceback.format_exc(limit=4),
                })
    if reports:
        emit_report(reports, out_dir / "reports.jsonl")
    if failures:
        (out_dir / "failures.json").parent.mkdir(parents=True, exist_ok=True)
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return reports, failures
