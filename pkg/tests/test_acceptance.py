"""One test per acceptance criterion; each prints a ``criterion N: PASS/FAIL`` line."""

import time

import numpy as np
import pytest
from desk import (
    ALPHA_GRID,
    BRANCH_CHILDREN,
    BRANCH_EPOCH,
    BRANCH_HIGH_LR,
    BRANCH_OVERRIDES,
    CORRELATION_OVERRIDES,
    DELAYED_ALPHA,
    DELAYED_EPOCHS,
    NOISE_FRACTION,
    NOISY_ALPHAS,
    SMALL_LR,
    TUNED_LR,
    final_test,
    final_val,
    fixture,
    noisy_fixture,
)

from fisherlab.autodiff import FunctionOracle, ParamVector, finite_diff_grad, finite_diff_input_grad, flat_layout
from fisherlab.autodiff import max_relative_error
from fisherlab.curvature import tr_f_exact, tr_f_mc, tr_f_minibatch, tr_h_exact_small, tr_h_hutchinson
from fisherlab.datasets import Batch, Dataset, gen_spirals, load_idx, split, write_idx
from fisherlab.lab.checkpoint import checkpoint_bytes, parse_checkpoint
from fisherlab.lab.experiments import (
    DELAYED_STARTS,
    run_branch,
    run_delayed_start,
    run_noisy,
    run_sweep,
    summarize,
)
from fisherlab.lab.train import load_data, model_spec, run_train
from fisherlab.nets import (
    ModelOracle,
    ModelSpec,
    forward_logits,
    init_params,
    per_example_cross_entropy,
    value_and_input_grad,
)
from fisherlab.regularizers import RegularizerConfig, penalty_grad, penalty_labels, penalty_value

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    start = time.perf_counter()

    def report(n: int, ok: bool, detail: str, budget_s: float) -> None:
        elapsed = time.perf_counter() - start
        ok = bool(ok) and elapsed < budget_s
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s of {budget_s:.0f}s) {detail}")
        assert ok, detail

    return report


def quadratic():
    a = np.diag([1.0, 2.0, 3.0])
    return FunctionOracle(lambda t: 0.5 * t @ a @ t, lambda t: a @ t, flat_layout(3))


# ---------------------------------------------------------------------------


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(0)
    spirals = load_data(fixture()).train
    gauss = load_data(noisy_fixture()).train
    models = [
        ("linear", ModelSpec("linear", (2,), 2), "he", spirals),
        ("mlp-tanh spirals", ModelSpec("mlp", (2,), 2, (64, 64), "tanh"), "lecun", spirals),
        ("mlp-tanh gaussians", ModelSpec("mlp", (32,), 10, (64, 64), "tanh"), "lecun", gauss),
        ("mlp-relu", ModelSpec("mlp", (2,), 2, (64, 64), "relu"), "he", spirals),
    ]
    images = rng.uniform(0, 1, (16, 1, 8, 8))
    conv_data = Dataset(images, rng.integers(0, 10, 16), 10)
    models.append(("conv", ModelSpec("conv", (1, 8, 8), 10, channels=(4, 6)), "he", conv_data))
    worst = {}
    for name, spec, scheme, data in models:
        x, y = data.inputs[:16], data.labels[:16]
        theta = init_params(spec, scheme, seed=1)
        oracle = ModelOracle(spec, x, y)
        _, g = oracle(theta)
        param_err = max_relative_error(g, finite_diff_grad(oracle, theta))
        _, gx = value_and_input_grad(spec, theta, x, y)
        fd_x = finite_diff_input_grad(lambda z: per_example_cross_entropy(forward_logits(spec, theta, z), y), x)
        input_err = max_relative_error(gx, fd_x)
        worst[name] = max(param_err, input_err)
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    verdict(1, max(worst.values()) < 1e-6, f"max relative errors: {detail}", 60)


def test_fisher_trace_estimators_agree(verdict):
    data = gen_spirals(4, 64, 0.2, seed=3)
    data = Dataset((data.inputs - data.inputs.mean(0)) / data.inputs.std(0), data.labels, 4)
    spec = ModelSpec("mlp", (2,), 4, (16, 16), "tanh")
    assert spec.n_params <= 500 and len(data) <= 256
    theta = init_params(spec, "lecun", seed=3, scale=2.0)
    exact = tr_f_exact(spec, theta, data).value
    hits = 0
    for seed in range(20):
        est = tr_f_mc(spec, theta, data, 256, 16, seed=seed)
        assert est.n_samples == 4096
        hits += abs(est.value - exact) <= 2.0 * est.std_error
    verdict(2, hits >= 18, f"exact={exact:.4f} within 2 SE for {hits}/20 seeds", 300)


def test_hutchinson_correctness(verdict):
    theta = ParamVector([0.1, -0.4, 0.7])
    quad = tr_h_hutchinson(quadratic(), theta, M=2000, seed=0)
    ok_quad = abs(quad.value - 6.0) <= 3.0 * quad.std_error
    rng = np.random.default_rng(2)
    spec = ModelSpec("mlp", (3,), 3, (6,), "tanh")
    small = init_params(spec, "lecun", seed=2)
    oracle = ModelOracle(spec, rng.standard_normal((24, 3)), rng.integers(0, 3, 24))
    exact = tr_h_exact_small(oracle, small).value
    mlp = tr_h_hutchinson(oracle, small, M=400, seed=2)
    ok_mlp = abs(mlp.value - exact) <= 3.0 * mlp.std_error
    singles = np.array([tr_h_hutchinson(quadratic(), theta, M=1, seed=s).value for s in range(500)])
    grand_se = singles.std(ddof=1) / np.sqrt(singles.size)
    ok_unbiased = abs(singles.mean() - 6.0) <= 4.0 * grand_se
    detail = (
        f"quadratic {quad.value:.3f}+-{quad.std_error:.3f}; mlp {mlp.value:.3f}+-{mlp.std_error:.3f} vs "
        f"exact {exact:.3f}; M=1 mean {singles.mean():.3f}+-{grand_se:.3f}"
    )
    verdict(3, ok_quad and ok_mlp and ok_unbiased, detail, 300)


def test_penalty_gradient_correctness(verdict):
    rng = np.random.default_rng(4)
    spec = ModelSpec("mlp", (3,), 3, (5,), "tanh")
    theta = init_params(spec, "lecun", seed=4)
    batch = Batch(rng.standard_normal((6, 3)), rng.integers(0, 3, 6))
    errors = {}
    for kind in ("FP", "GP", "GPr", "GPx"):
        cfg = RegularizerConfig(kind, 1.0)
        labels = None if kind == "GPx" else penalty_labels(spec, theta, batch, cfg, seed=4)
        grad = penalty_grad(spec, theta, batch, cfg, seed=4, labels=labels)
        value = FunctionOracle(
            lambda t: penalty_value(spec, ParamVector(t, theta.layout), batch, cfg, labels=labels),
            lambda t: np.zeros_like(t),
            theta.layout,
        )
        errors[kind] = max_relative_error(grad, finite_diff_grad(value, theta))
    detail = " ".join(f"{k}={v:.1e}" for k, v in errors.items())
    verdict(4, max(errors.values()) < 1e-3, f"max relative errors: {detail}", 120)


def test_identity_contracts(verdict, tmp_path):
    run_train(fixture(optim__lr=SMALL_LR), tmp_path / "base")
    run_train(fixture(optim__lr=SMALL_LR, reg__kind="FP", reg__alpha="0"), tmp_path / "alpha0")
    run_train(fixture(optim__lr=SMALL_LR, reg__kind="FP", reg__alpha="0.06", reg__start_epoch="400"), tmp_path / "late")
    base = (tmp_path / "base" / "metrics.csv").read_bytes()
    same_alpha0 = base == (tmp_path / "alpha0" / "metrics.csv").read_bytes()
    same_late = base == (tmp_path / "late" / "metrics.csv").read_bytes()

    cfg = fixture()
    train = load_data(cfg).train
    spec = model_spec(cfg, train)
    theta = init_params(spec, "lecun", seed=0)
    batch = Batch(train.inputs[:16], train.labels[:16])
    fp = RegularizerConfig("FP", 0.1)
    fp_matches = all(
        penalty_value(spec, theta, batch, fp, seed=s) == tr_f_minibatch(spec, theta, batch, seed=s).value
        for s in range(10)
    )
    zero = theta.copy()
    zero.view("out.weight")[...] = 0.0
    zero.view("out.bias")[...] = 0.0
    gpr = RegularizerConfig("GPr", 0.1)
    gpr_matches = all(
        penalty_value(spec, zero, batch, fp, s) == penalty_value(spec, zero, batch, gpr, s)
        and np.array_equal(penalty_grad(spec, zero, batch, fp, s).data, penalty_grad(spec, zero, batch, gpr, s).data)
        for s in range(10)
    )
    detail = f"alpha0={same_alpha0} late_start={same_late} FP=TrF_B:{fp_matches} FP=GPr@0:{gpr_matches}"
    verdict(5, same_alpha0 and same_late and fp_matches and gpr_matches, detail, 120)


def test_fisher_explosion(verdict):
    small = run_train(fixture(optim__lr=SMALL_LR, probe__per_step="true"))
    tuned = run_train(fixture(optim__lr=TUNED_LR, probe__per_step="true"))
    epoch_max = {
        name: max(r.tr_f for r in res.rows if r.tr_f is not None and r.test_acc is not None)
        for name, res in (("small", small), ("tuned", tuned))
    }
    step_max = {
        name: max(r.tr_f for r in res.rows if r.tr_f is not None and r.test_acc is None)
        for name, res in (("small", small), ("tuned", tuned))
    }
    ratio = epoch_max["small"] / epoch_max["tuned"]
    acc_small, acc_tuned = final_test(small), final_test(tuned)
    ok = ratio >= 2.0 and acc_small < acc_tuned and step_max["tuned"] < step_max["small"]
    detail = (
        f"max tr_f small={epoch_max['small']:.2f} tuned={epoch_max['tuned']:.2f} (x{ratio:.2f}); "
        f"test small={acc_small:.4f} tuned={acc_tuned:.4f}; per-step max tuned={step_max['tuned']:.2f} "
        f"< small={step_max['small']:.2f}"
    )
    verdict(6, ok, detail, 1800)


def test_fisher_penalty_rescue(verdict):
    base = run_train(fixture(optim__lr=SMALL_LR))
    tuned = run_train(fixture(optim__lr=TUNED_LR))
    runs = [run_train(fixture(optim__lr=SMALL_LR, reg__kind="FP", reg__alpha=a)) for a in ALPHA_GRID]
    k = int(np.argmax([final_val(r) for r in runs]))  # first maximum wins
    best = runs[k]
    drop = base.summary.max_tr_f / best.summary.max_tr_f
    gap = final_test(tuned) - final_test(best)
    detail = (
        f"alpha={ALPHA_GRID[k]:.4g} peak tr_f {base.summary.max_tr_f:.2f} -> {best.summary.max_tr_f:.2f} "
        f"(x{drop:.2f}); test FP={final_test(best):.4f} tuned-lr={final_test(tuned):.4f}"
    )
    verdict(7, drop >= 2.0 and gap <= 0.01, detail, 7200)


def test_delayed_start(verdict):
    cfg = fixture(optim__lr=SMALL_LR, optim__epochs=DELAYED_EPOCHS, reg__kind="FP", reg__alpha=DELAYED_ALPHA)
    starts = [e for e in DELAYED_STARTS if e < DELAYED_EPOCHS]
    report = run_delayed_start(cfg, starts)
    acc = {start: test for start, test, _ in report.rows}
    early = min(acc[e] for e in starts if e <= 4)
    latest = max(starts)
    detail = " ".join(f"E={e}:{a:.4f}" for e, a in acc.items())
    verdict(8, acc[latest] < early, f"{detail}; E={latest} vs min over E<=4 = {early:.4f}", 7200)


def test_memorization(verdict):
    lines, base_m, fp_m = [], [], []
    for seed in (0, 1, 2):
        cfg = noisy_fixture(run__seed=seed)
        data = load_data(cfg.set("data.label_noise", NOISE_FRACTION))
        base = run_noisy(cfg, NOISE_FRACTION, data=data)
        fps = [run_noisy(cfg.update({"reg.kind": "FP", "reg.alpha": a}), NOISE_FRACTION, data=data) for a in NOISY_ALPHAS]
        k = int(np.argmax([max(r.val_acc for r in f.result.rows) for f in fps]))
        fp = fps[k]
        for store, rep in ((base_m, base), (fp_m, fp)):
            store.append([rep.mean_ratio_gap, rep.noisy_acc_at_clean_90, rep.test_acc_at_best_val, rep.early_cosine])
        lines.append(
            f"seed {seed} alpha={NOISY_ALPHAS[k]:.3g}: |ratio-1| {base.mean_ratio_gap:.3f}/{fp.mean_ratio_gap:.3f} "
            f"noisy@clean90 {base.noisy_acc_at_clean_90:.3f}/{fp.noisy_acc_at_clean_90:.3f} "
            f"test@bestval {base.test_acc_at_best_val:.3f}/{fp.test_acc_at_best_val:.3f} "
            f"early cos {base.early_cosine:.3f}"
        )
    b, f = np.mean(base_m, axis=0), np.mean(fp_m, axis=0)
    ok = f[0] < b[0] and f[1] < b[1] and f[2] > b[2] and b[3] < 0
    means = (
        f"means base/FP: |ratio-1| {b[0]:.3f}/{f[0]:.3f} noisy@clean90 {b[1]:.3f}/{f[1]:.3f} "
        f"test@bestval {b[2]:.3f}/{f[2]:.3f} early cos {b[3]:.3f}"
    )
    verdict(9, ok, means + "; " + "; ".join(lines), 7200)


def test_hessian_and_fisher_traces_correlate(verdict, tmp_path):
    run_train(fixture(**CORRELATION_OVERRIDES), tmp_path / "run")
    report = summarize([tmp_path / "run" / "metrics.csv"], 0.5)
    _, _, corr, n = report.entries[0]
    ok = n >= 100 and corr is not None and corr > 0.8
    verdict(10, ok, f"Pearson(tr_f, tr_h) = {corr:.3f} over {n} probes", 1800)


def test_early_trace_predicts_generalization(verdict):
    seeds = [0, 1, 2, 3]
    by_lr = run_sweep(fixture(probe__every="1"), "learning_rate", [0.003, 0.01, 0.03], seeds)
    by_batch = run_sweep(fixture(probe__every="1", optim__lr=TUNED_LR), "batch_size", [8, 32, 128], seeds)
    rho_lr, rho_batch = by_lr.spearman_trfi, by_batch.spearman_trfi
    ok = rho_lr is not None and rho_batch is not None and rho_lr < 0 and rho_batch < 0
    detail = f"Spearman(TrF_i, test acc): learning rate {rho_lr}, batch size {rho_batch}"
    verdict(11, ok, detail, 10800)


def test_branching(verdict):
    holds, lines = [], []
    for seed in (0, 1, 2):
        cfg = fixture(**BRANCH_OVERRIDES, run__seed=seed)
        report = run_branch(cfg, BRANCH_EPOCH, BRANCH_CHILDREN, high=cfg.set("optim.lr", BRANCH_HIGH_LR), low=cfg)
        med = report.medians()
        holds.append(report.direction_holds())
        lines.append(
            f"seed {seed}: low-TrF parent={report.low_trf_parent()} tr_f@branch "
            f"high={report.parent_tr_f['high']:.2f} low={report.parent_tr_f['low']:.2f}; "
            f"median TrH_f high={med['high']:.2f} low={med['low']:.2f}"
        )
    verdict(12, sum(h is True for h in holds) >= 2 and all(holds), "; ".join(lines), 10800)


def test_determinism_and_formats(verdict, tmp_path):
    a = run_train(fixture(probe__hutchinson_m="5"), tmp_path / "a")
    run_train(fixture(probe__hutchinson_m="5"), tmp_path / "b")
    same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    raw = (tmp_path / "a" / "checkpoint.flck").read_bytes()
    spec, theta, state = parse_checkpoint(raw)
    same_ckpt = checkpoint_bytes(spec, theta, state) == raw and np.array_equal(theta.data, a.theta.data)

    rng = np.random.default_rng(13)
    pixels = rng.integers(0, 256, (50, 8, 8), dtype=np.uint8)
    images = Dataset(pixels / 255.0, rng.integers(0, 10, 50), 10)
    write_idx(images, tmp_path / "img.idx", tmp_path / "lab.idx")
    back = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx", n_classes=10)
    write_idx(back, tmp_path / "img2.idx", tmp_path / "lab2.idx")
    same_idx = (
        np.array_equal(np.rint(back.inputs * 255).astype(np.uint8), pixels)
        and (tmp_path / "img.idx").read_bytes() == (tmp_path / "img2.idx").read_bytes()
        and (tmp_path / "lab.idx").read_bytes() == (tmp_path / "lab2.idx").read_bytes()
    )
    split(back, (0.6, 0.2, 0.2), seed=0)  # loaded images feed the normal pipeline
    detail = f"csv={same_csv} checkpoint={same_ckpt} idx={same_idx}"
    verdict(13, same_csv and same_ckpt and same_idx, detail, 300)
