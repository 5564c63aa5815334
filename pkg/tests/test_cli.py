"""End-to-end command-line surface on a small synthetic series."""

import json

import pytest

from mixcast import cli, metrics as M, mixer


TRAIN_ARGS = ["--dataset", "generic", "--lookback", "16", "--horizon", "8",
              "--embed-dim", "8", "--blocks", "1", "--heads", "2",
              "--conv-width", "0", "--dropout", "0.1", "--batch", "32",
              "--lr", "0.003", "--warmup", "5", "--epochs", "2",
              "--patience", "10", "--seed", "2021"]


def run_train(tiny_csv, out_dir, extra=()):
    args = ["train", "--data", str(tiny_csv), "--out", str(out_dir)]
    args += TRAIN_ARGS + list(extra)
    return cli.main(args)


def test_train_writes_artifacts(tiny_csv, tmp_path):
    out = tmp_path / "run"
    assert run_train(tiny_csv, out) == 0
    log_rows = [json.loads(l) for l in (out / "loss_log.jsonl").read_text().splitlines()]
    assert len(log_rows) == 2
    assert set(log_rows[0]) == {"epoch", "train_mae", "val_mae", "lr"}
    assert (out / "best" / "manifest.txt").exists()
    assert (out / "run_meta.json").exists()
    records = M.parse_report(out / "report.jsonl")
    datasets = {r["dataset"] for r in records}
    assert "tiny/val" in datasets and "tiny/test" in datasets
    for r in records:
        assert r["wall_time_s"] == 0.0  # timings live in run_meta.json


def test_train_runs_are_byte_identical(tiny_csv, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run_train(tiny_csv, out1)
    run_train(tiny_csv, out2)
    assert (out1 / "report.jsonl").read_bytes() == (out2 / "report.jsonl").read_bytes()
    assert (out1 / "loss_log.jsonl").read_bytes() == (out2 / "loss_log.jsonl").read_bytes()


def test_eval_reproduces_test_metrics(tiny_csv, tmp_path):
    out = tmp_path / "run"
    run_train(tiny_csv, out)
    report_path = tmp_path / "eval.jsonl"
    code = cli.main(["eval", "--checkpoint", str(out / "best"),
                     "--data", str(tiny_csv), "--dataset", "generic",
                     "--split", "test", "--report", str(report_path)])
    assert code == 0
    eval_rec = [r for r in M.parse_report(report_path) if r["seed"] != "mean"][0]
    train_rec = [r for r in M.parse_report(out / "report.jsonl")
                 if r["dataset"] == "tiny/test"][0]
    for key in ("mse", "mae", "rmse", "mape"):
        assert eval_rec[key] == train_rec[key]


def test_forecast_emits_columns(tiny_csv, tmp_path):
    out = tmp_path / "run"
    run_train(tiny_csv, out)
    emit = tmp_path / "window.csv"
    code = cli.main(["forecast", "--checkpoint", str(out / "best"),
                     "--data", str(tiny_csv), "--window-index", "3",
                     "--emit", str(emit)])
    assert code == 0
    lines = emit.read_text().splitlines()
    assert lines[0] == "t,variate,x,y,yhat"
    assert len(lines) == 1 + 3 * (16 + 8)


def test_decode_token_emits_series(tiny_csv, tmp_path):
    out = tmp_path / "run"
    run_train(tiny_csv, out)
    emit = tmp_path / "token.csv"
    code = cli.main(["decode-token", "--checkpoint", str(out / "best"),
                     "--emit", str(emit)])
    assert code == 0
    lines = emit.read_text().splitlines()
    assert lines[0] == "step,decoded_token"
    assert len(lines) == 1 + 8  # horizon rows


def test_ablation_subcommand_records_config_id(tiny_csv, tmp_path):
    out = tmp_path / "run6"
    args = ["ablation", "--id", "6", "--data", str(tiny_csv), "--out", str(out)]
    args += TRAIN_ARGS
    assert cli.main(args) == 0
    records = M.parse_report(out / "report.jsonl")
    assert all(r["config_id"] == "6" for r in records)
    _, cfg, extra = mixer.load_checkpoint(out / "best")
    assert cfg.slstm_axis == mixer.AXIS_NONE
    assert not cfg.init_token
    assert extra["config_id"] == "6"


def test_config_file_with_flag_precedence(tiny_csv, tmp_path):
    cfg_file = tmp_path / "run.conf"
    cfg_file.write_text("# tiny run\nlookback=12\nepochs=1\nembed-dim=8\n"
                        "heads=2\nhorizon=8\ndropout=0.0\n")
    out = tmp_path / "run"
    code = cli.main(["train", "--data", str(tiny_csv), "--out", str(out),
                     "--config", str(cfg_file),
                     "--lookback", "16", "--batch", "32", "--seed", "7",
                     "--lr", "0.003", "--warmup", "2", "--patience", "5",
                     "--blocks", "1", "--conv-width", "0", "--epochs", "1"])
    assert code == 0
    _, cfg, _ = mixer.load_checkpoint(out / "best")
    assert cfg.lookback == 16   # flag beats the file
    assert cfg.horizon == 8     # file value applied
    assert cfg.block.dropout_rate == 0.0
    log_rows = (out / "loss_log.jsonl").read_text().splitlines()
    assert len(log_rows) == 1   # epochs from the explicit flag


def test_config_file_rejects_unknown_keys(tiny_csv, tmp_path):
    cfg_file = tmp_path / "bad.conf"
    cfg_file.write_text("no-such-flag=3\n")
    with pytest.raises(SystemExit):
        cli.main(["train", "--data", str(tiny_csv), "--out", str(tmp_path / "o"),
                  "--config", str(cfg_file)])


def test_gradcheck_tiny_exits_zero(capsys):
    assert cli.main(["gradcheck", "--tiny"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out


def test_missing_data_file_is_reported(tmp_path):
    code = cli.main(["train", "--data", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "o")] + TRAIN_ARGS)
    assert code == 2


def test_window_index_out_of_range_is_reported(tiny_csv, tmp_path, capsys):
    out = tmp_path / "run"
    run_train(tiny_csv, out)
    code = cli.main(["forecast", "--checkpoint", str(out / "best"),
                     "--data", str(tiny_csv), "--window-index", "99999",
                     "--emit", str(tmp_path / "w.csv")])
    assert code == 2
    assert "out of range" in capsys.readouterr().err


def test_missing_checkpoint_is_reported(tiny_csv, tmp_path, capsys):
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "nothing"),
                     "--data", str(tiny_csv), "--dataset", "generic",
                     "--split", "test", "--report", str(tmp_path / "r.jsonl")])
    assert code == 2


def test_etth_kind_end_to_end(tmp_path):
    # ETT-shaped series (fixed 12/4/4-month boundaries) through the CLI.
    from conftest import synthetic_series, write_series_csv

    values = synthetic_series(14400, 7, seed=23)
    csv_path = write_series_csv(tmp_path / "ett_like.csv", values)
    out = tmp_path / "run"
    code = cli.main(["train", "--data", str(csv_path), "--dataset", "etth",
                     "--lookback", "48", "--horizon", "24",
                     "--embed-dim", "16", "--blocks", "1", "--heads", "2",
                     "--conv-width", "0", "--dropout", "0.1",
                     "--batch", "64", "--lr", "0.001", "--warmup", "10",
                     "--epochs", "1", "--patience", "10", "--seed", "2021",
                     "--out", str(out)])
    assert code == 0
    records = M.parse_report(out / "report.jsonl")
    test_rec = [r for r in records if r["dataset"] == "ett_like/test"][0]
    assert test_rec["horizon"] == 24
    assert test_rec["rmse"] ** 2 == pytest.approx(test_rec["mse"], abs=1e-12)
