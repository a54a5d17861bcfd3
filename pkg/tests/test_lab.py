import dataclasses

import numpy as np
import pytest
from desk import NOISE_FRACTION, noisy_fixture

from fisherlab.datasets import Dataset
from fisherlab.lab.checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from fisherlab.lab.cli import main
from fisherlab.lab.config import ConfigError, ExperimentConfig, parse_config, stream_seed
from fisherlab.lab.experiments import (
    run_branch,
    run_delayed_start,
    run_noisy,
    run_sweep,
    summarize,
)
from fisherlab.lab.metrics import (
    COLUMNS,
    MetricsRow,
    NoProbeBeforeCrossingError,
    header_line,
    parse_metrics,
    read_metrics,
    rows_to_csv,
    trfi_from_log,
)
from fisherlab.lab.train import group_gradient_stats, run_train
from fisherlab.nets import ModelSpec, init_params
from fisherlab.optim import SgdState

TINY = {
    "model.hidden": "8,8",
    "model.activation": "tanh",
    "model.init": "lecun",
    "data.per_class": "40",
    "data.noise": "0.2",
    "optim.batch_size": "16",
    "optim.epochs": "3",
    "probe.trf_examples": "32",
    "probe.hutchinson_m": "2",
    "probe.hutchinson_examples": "32",
}


def tiny(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig().update(TINY)
    return cfg.update({k.replace("__", "."): v for k, v in overrides.items()})


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_config_round_trip_and_errors():
    cfg = tiny(reg__kind="FP", reg__alpha="0.05", optim__milestones="2,5", data__split="0.5,0.25,0.25")
    assert parse_config(cfg.dumps()) == cfg
    with pytest.raises(ConfigError):
        parse_config("model.width = 3\n")
    with pytest.raises(ConfigError):
        parse_config("nonsense\n")
    with pytest.raises(ConfigError):
        tiny(optim__epochs="three")


def test_headline_learning_rates_accepted_verbatim():
    for lr in ("0.0316", "0.001"):
        assert parse_config(f"optim.lr = {lr}\n").optim.lr == float(lr)


def test_stream_seeds_are_distinct_and_stable():
    seeds = {stream_seed(0, label) for label in ("init", "shuffle", "penalty", "probe", "mixup")}
    assert len(seeds) == 5
    assert stream_seed(3, "probe", 1, 2) == stream_seed(3, "probe", 1, 2)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_csv_header_matches_row_fields():
    assert header_line().strip().split(",") == [f.name for f in dataclasses.fields(MetricsRow)]
    assert COLUMNS[:4] == ("epoch", "step", "lr", "train_loss")


def test_empty_curvature_fields_round_trip():
    rows = [MetricsRow(0, 0, 0.1, train_loss=1.5), MetricsRow(1, 10, 0.1, train_loss=0.4, tr_f=7.0)]
    text = rows_to_csv(rows)
    assert text.splitlines()[1].split(",")[COLUMNS.index("tr_f")] == ""
    assert parse_metrics(text) == rows


def test_trfi_extraction():
    rows = [
        MetricsRow(0, 0, train_loss=2.0, tr_f=3.0),
        MetricsRow(1, 5, train_loss=1.0, tr_f=7.0),
        MetricsRow(2, 10, train_loss=0.5, tr_f=9.0),
    ]
    assert trfi_from_log(rows, 1.2) == 7.0
    assert trfi_from_log(rows, 3.5) == 3.0
    assert trfi_from_log(rows, 0.1) is None
    with pytest.raises(NoProbeBeforeCrossingError):
        trfi_from_log([MetricsRow(0, 0, train_loss=0.3), MetricsRow(1, 5, tr_f=2.0)], 0.5)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec("conv", (1, 8, 8), 3, channels=(2, 3), activation="tanh")
    theta = init_params(spec, seed=2)
    state = SgdState(theta.with_data(np.random.default_rng(0).standard_normal(theta.data.size)), 0.9, 1e-4)
    save_checkpoint(tmp_path / "c.flck", spec, theta, state)
    spec2, theta2, state2 = load_checkpoint(tmp_path / "c.flck")
    assert spec2 == spec and np.array_equal(theta2.data, theta.data)
    assert np.array_equal(state2.velocity.data, state.velocity.data) and state2.weight_decay == 1e-4
    assert checkpoint_bytes(spec2, theta2, state2) == (tmp_path / "c.flck").read_bytes()
    assert parse_checkpoint(checkpoint_bytes(spec, theta))[2] is None


def test_checkpoint_errors():
    spec = ModelSpec("linear", (2,), 2)
    raw = checkpoint_bytes(spec, init_params(spec))
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        parse_checkpoint(raw[:-3])


# ---------------------------------------------------------------------------
# Group gradient statistics
# ---------------------------------------------------------------------------


def test_group_stats_identical_groups():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((10, 3))
    y = rng.integers(0, 3, 10)
    data = Dataset(np.concatenate([x, x]), np.concatenate([y, y]), 3)
    mask = np.arange(20) >= 10
    spec = ModelSpec("mlp", (3,), 3, hidden=(4,), activation="tanh")
    gs = group_gradient_stats(spec, init_params(spec, seed=1), data, mask)
    assert abs(gs.ratio - 1.0) < 1e-9 and abs(gs.cosine - 1.0) < 1e-9
    with pytest.raises(ValueError):
        group_gradient_stats(spec, init_params(spec), data, np.zeros(20, bool))


def test_epoch_one_clean_noisy_cosine_is_negative():
    cfg = noisy_fixture(optim__lr="0.03", optim__epochs="1")
    result = run_noisy(cfg, NOISE_FRACTION).result
    assert result.rows[1].epoch == 1
    assert result.rows[1].cos_clean_noisy < 0


# ---------------------------------------------------------------------------
# Training runs
# ---------------------------------------------------------------------------


def test_zero_alpha_metrics_are_byte_identical(tmp_path):
    run_train(tiny(), tmp_path / "a")
    run_train(tiny(reg__kind="FP", reg__alpha="0"), tmp_path / "b")
    run_train(tiny(reg__kind="FP", reg__alpha="0.1", reg__start_epoch="50"), tmp_path / "c")
    base = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert base == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert base == (tmp_path / "c" / "metrics.csv").read_bytes()


def test_probes_do_not_change_the_trajectory():
    with_probes = run_train(tiny(reg__kind="FP", reg__alpha="0.05", probe__per_step="true"))
    without = run_train(tiny(reg__kind="FP", reg__alpha="0.05"), probes=False)
    assert np.array_equal(with_probes.theta.data, without.theta.data)
    assert any(r.tr_f is not None for r in with_probes.rows)
    assert all(r.tr_f is None and r.tr_h is None for r in without.rows)


def test_run_is_deterministic(tmp_path):
    run_train(tiny(), tmp_path / "a")
    run_train(tiny(), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert [(r.epoch, r.step) for r in rows] == sorted((r.epoch, r.step) for r in rows)


def test_branch_continues_from_initial_parameters():
    parent = run_train(tiny(optim__epochs="1"))
    child = run_train(tiny(), initial=parent.theta, first_epoch=1, first_step=parent.steps)
    assert child.rows[0].epoch == 1 and child.rows[0].step == parent.steps
    assert child.rows[0].train_loss == parent.rows[-1].train_loss


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


def test_study_argument_checks():
    with pytest.raises(ValueError):
        run_sweep(tiny(), "learning_rate", [0.01], [0, 1])
    with pytest.raises(ValueError):
        run_sweep(tiny(), "learning_rate", [0.01, 0.1], [0])
    with pytest.raises(ValueError):
        run_branch(tiny(), 1, 1)
    with pytest.raises(ValueError):
        run_delayed_start(tiny(), [])
    with pytest.raises(ValueError):
        run_noisy(tiny(), 0.0)


def test_delayed_start_beyond_horizon_equals_baseline():
    report = run_delayed_start(tiny(reg__kind="FP", reg__alpha="0.1"), [1, 10])
    base = run_train(tiny())
    assert report.rows[1][1] == base.rows[-1].test_acc
    assert report.rows[0][1] is not None


def test_small_sweep_and_branch_reports(tmp_path):
    sweep = run_sweep(tiny(probe__hutchinson_m="0", run__epsilon="0.68"), "learning_rate", [0.01, 0.1], [0, 1])
    assert len(sweep.runs) == 4 and "spearman_trfi_test_acc:" in sweep.text()
    branch = run_branch(tiny(), 1, 2, out_dir=tmp_path)
    assert len(branch.children) == 4
    text = (tmp_path / "branch_report.txt").read_text()
    assert text.startswith("branch_epoch: 1\n") and "children_low_median_trh_f:" in text


def test_summarize_constant_series_and_order(tmp_path):
    rows = [MetricsRow(e, e, train_loss=1.0, val_acc=0.5, tr_f=2.0, tr_h=3.0) for e in range(4)]
    (tmp_path / "b.csv").write_text(rows_to_csv(rows))
    varied = [MetricsRow(e, e, train_loss=1.0, tr_f=float(e), tr_h=2.0 * e + 1) for e in range(4)]
    (tmp_path / "a.csv").write_text(rows_to_csv(varied))
    report = summarize([tmp_path / "b.csv", tmp_path / "a.csv"], 0.5)
    text = report.text()
    assert "pearson_tr_f_tr_h: undefined" in text
    assert text.index("b.csv") < text.index("a.csv")
    assert report.entries[1][2] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------


def test_cli_train_probe_summarize(tmp_path, capsys):
    config = tmp_path / "run.cfg"
    config.write_text(tiny().dumps())
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "run"), "--set", "optim.epochs=2"]) == 0
    assert "max_tr_f:" in capsys.readouterr().out
    assert main(["probe", "--config", str(config), "--checkpoint", str(tmp_path / "run" / "checkpoint.flck")]) == 0
    out = capsys.readouterr().out
    assert "tr_f:" in out and "tr_h:" in out
    assert main(["summarize", "--epsilon", "0.5", str(tmp_path / "run" / "metrics.csv")]) == 0
    assert "pearson_tr_f_tr_h:" in capsys.readouterr().out


def test_cli_reports_config_errors(capsys):
    assert main(["train", "--set", "model.width=3"]) == 2
    assert "error:" in capsys.readouterr().err
