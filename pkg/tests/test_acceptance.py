"""End-to-end acceptance criteria for the desk-scale robustness study.

Each test prints one ``ACCEPTANCE <n> ... PASS`` line (run with ``-s`` to
see them live).  The heavy shared pieces — trained networks and the
attack/curve suite on the 256-dimensional scenario — are built once per
session in module fixtures; expect roughly an hour end to end on one
CPU.
"""

import numpy as np
import pytest

from robustcs import attacks, bench, nets
from robustcs import operators as ops
from robustcs import signals as sig
from robustcs.attacks import AttackConfig, find_adversarial
from robustcs.autodiff import Tape, sub, sumsq
from robustcs.methods import NetMethod, TvMethod
from robustcs.nets import ConvBlockSpec, ReconNet, TrainConfig
from robustcs.tv import AdmmConfig, TvProblem, tv_solve, tv_unrolled

from oracles import central_diff_gradient, pdhg_tv_batch, rel_err

N, M_MEAS = 256, 100
ETA_GRID = [0.005, 0.02, 0.06]
N_SIGNALS = 20
GAUSS_DRAWS = 50
BENCH_ADMM = AdmmConfig(tol_primal=1e-6, tol_dual=1e-6, max_iters=4000)
ATTACK = AttackConfig(steps=60, restarts=3, polish_steps=30)


def report(num, name, detail=""):
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {num:02d} {name}: PASS{suffix}")


@pytest.fixture(scope="module")
def ctx():
    A = ops.sample_gaussian_operator(M_MEAS, N, seed=2024)
    D = ops.GradientOp1D(N)
    tik = ops.tikhonov_inverse(A, D, alpha=0.02)
    spec = sig.PiecewiseConstantSpec()
    rng = np.random.default_rng(7)
    test = np.stack([sig.sample_piecewise_constant(spec, rng) for _ in range(N_SIGNALS)])
    train_pool = sig.make_dataset(A, spec, M=1000, rng=8).signals
    return {"A": A, "D": D, "tik": tik, "test": test, "train": train_pool}


@pytest.fixture(scope="module")
def trained_nets(ctx):
    A, tik, pool = ctx["A"], ctx["tik"], ctx["train"]
    ynorm = float(np.linalg.norm((A.matrix @ pool.T).T, axis=1).mean())
    out = {}
    for kind, epochs, size, bs in (
        ("postproc", 20, 1000, 32),
        ("fully_learned", 20, 1000, 32),
        ("iterative", 30, 600, 16),
    ):
        net = ReconNet(kind, A, tik, seed=11, K=8)
        cfg = TrainConfig(epochs=epochs, batch_size=bs, lr=1e-3,
                          weight_decay=1e-5, jitter_bound=0.08 * ynorm, seed=12)
        nets.train(net, pool[:size], A, cfg)
        out[kind] = net
    return out


@pytest.fixture(scope="module")
def suite(ctx, trained_nets):
    """Curves, raw records, attack audits, and noiseless baselines."""
    A, D, test = ctx["A"], ctx["D"], ctx["test"]
    methods = {"tv": TvMethod(A, D, BENCH_ADMM)}
    methods.update({k: NetMethod(v, k) for k, v in trained_nets.items()})

    records, curves, audit = [], [], []
    kinds_by_method = {name: ["adversarial", "gaussian"] for name in methods}
    kinds_by_method["tv"] += ["uniform", "bernoulli"]
    for name, method in methods.items():
        for kind in kinds_by_method[name]:
            pts = bench.noise_to_error_curve(
                method, test, ETA_GRID, kind,
                draws=GAUSS_DRAWS, A=A, seed=31, attack_cfg=ATTACK,
                scenario="A1", records=records, attack_audit=audit,
            )
            curves.extend(pts)

    baselines = {}
    for name, method in methods.items():
        for eta in ETA_GRID:
            for si in range(test.shape[0]):
                ybar = A.apply(test[si])
                eta_abs = eta * np.linalg.norm(ybar)
                xhat = method.attack_map(eta_abs).evaluate(ybar)
                baselines[(name, eta, si)] = rel_err_plain(xhat, test[si])
    return {"methods": methods, "curves": curves, "records": records,
            "audit": audit, "baselines": baselines}


def rel_err_plain(xhat, xbar):
    return float(np.linalg.norm(xhat - xbar) / np.linalg.norm(xbar))


def curve_lookup(curves, method, kind):
    return {p.rel_noise: p.rel_error_mean for p in curves
            if p.method == method and p.noise_kind == kind}


# ---------------------------------------------------------------------------


def test_criterion_01_adjoint_identities(ctx):
    rng = np.random.default_rng(1)
    checks = [
        (ctx["A"].apply, ctx["A"].adjoint, N, M_MEAS),
        (ctx["D"].apply, ctx["D"].adjoint, N, N),
    ]
    D2 = ops.GradientOp2D(16, 16)
    checks.append((D2.apply, D2.adjoint, 256, 512))
    worst = 0.0
    for apply, adjoint, n_in, n_out in checks:
        for _ in range(100):
            x = rng.standard_normal(n_in)
            y = rng.standard_normal(n_out)
            gap = abs(np.dot(apply(x), y) - np.dot(x, adjoint(y)))
            worst = max(worst, gap / (np.linalg.norm(x) * np.linalg.norm(y)))
    assert worst <= 1e-10
    report(1, "adjoint identities", f"worst normalized gap {worst:.2e}")


def test_criterion_02_gradient_fidelity():
    rng = np.random.default_rng(2)
    worst_tv = 0.0
    # unrolled solver: 10 probes over small instances
    for probe in range(10):
        n, m = 8, 6
        A = ops.sample_gaussian_operator(m, n, seed=300 + probe)
        D = ops.GradientOp1D(n)
        x = np.zeros(n)
        x[3:6] = 1.0 + 0.2 * rng.random()
        ybar = A.apply(x)
        eta = 0.03 * np.linalg.norm(ybar)
        prob = TvProblem(A, ybar, D, "constrained", eta=eta)
        cfg = AdmmConfig(unroll_iters=25, tol_primal=1e-11, tol_dual=1e-11,
                         max_iters=50000)
        _, warm, _ = tv_solve(prob, cfg)
        y0 = ybar + 0.01 * rng.standard_normal(m)

        def loss(y):
            tape = Tape()
            xh = tv_unrolled(prob, cfg, warm, tape, y=tape.var(y))
            return float(sumsq(sub(xh, x)).data)

        tape = Tape()
        yv = tape.var(y0)
        g = tape.gradient(sumsq(sub(tv_unrolled(prob, cfg, warm, tape, y=yv), x)), yv)
        worst_tv = max(worst_tv, rel_err(g, central_diff_gradient(loss, y0, 1e-5)))
    assert worst_tv <= 1e-4

    # networks: 10 probes over the three pipeline kinds at N = 32
    n, m = 32, 16
    A = ops.sample_gaussian_operator(m, n, seed=33)
    tik = ops.tikhonov_inverse(A, ops.GradientOp1D(n), alpha=0.02)
    worst_net = 0.0
    for probe in range(10):
        kind = ("postproc", "fully_learned", "iterative")[probe % 3]
        net = ReconNet(kind, A, tik, spec=ConvBlockSpec(levels=2, channels=(3, 4)),
                       seed=400 + probe, K=3)
        p = net.params()
        p["out_w"] = 0.1 * rng.standard_normal(p["out_w"].shape)
        net.set_params(p)
        y0 = rng.standard_normal(m)

        def loss(y):
            return float(np.sum(net.forward(y) ** 2))

        tape = Tape()
        yv = tape.var(y0)
        g = tape.gradient(sumsq(net.forward(yv)), yv)
        worst_net = max(worst_net, rel_err(g, central_diff_gradient(loss, y0, 1e-5)))
    assert worst_net <= 1e-4
    report(2, "gradient fidelity",
           f"unrolled worst {worst_tv:.2e}, nets worst {worst_net:.2e}")


def test_criterion_03_tv_oracle_equivalence():
    rng = np.random.default_rng(3)
    As, Ds, ys, etas, probs = [], [], [], [], []
    for i in range(20):
        n, m = 8, 6
        A = ops.sample_gaussian_operator(m, n, seed=500 + i)
        D = ops.GradientOp1D(n)
        x = np.zeros(n)
        if i % 2 == 0:
            x[4:] = 1.0 + 0.5 * rng.random()  # one jump
        else:
            x[2:5] = 1.5
            x[5:] = -0.5  # two jumps
        y = A.apply(x)
        eta = 0.0 if i % 3 == 0 else 0.02 * np.linalg.norm(y)
        As.append(A.matrix)
        Ds.append(D.matrix)
        ys.append(y)
        etas.append(eta)
        probs.append(TvProblem(A, y, D, "constrained", eta=eta))
    ref = pdhg_tv_batch(As, Ds, ys, n_iter=10**6, etas=etas)
    tight = AdmmConfig(tol_primal=1e-11, tol_dual=1e-11, max_iters=50000)
    worst = 0.0
    for i, prob in enumerate(probs):
        xhat, _, _ = tv_solve(prob, tight)
        worst = max(worst, rel_err(xhat, ref[i]))
    assert worst <= 1e-4
    report(3, "independent-solver equivalence", f"worst rel L2 gap {worst:.2e}")


def test_criterion_04_noiseless_exact_recovery(ctx):
    A, D = ctx["A"], ctx["D"]
    spec = sig.PiecewiseConstantSpec(N=N, jumps_min=2, jumps_max=4)
    rng = np.random.default_rng(4)
    hits = 0
    worst = 0.0
    for _ in range(100):
        x = sig.sample_piecewise_constant(spec, rng)
        prob = TvProblem(A, A.apply(x), D, "constrained", eta=0.0)
        xhat, _, _ = tv_solve(prob, AdmmConfig())
        err = rel_err_plain(xhat, x)
        worst = max(worst, err)
        hits += err <= 1e-3
    assert hits >= 95
    report(4, "noiseless exact recovery", f"{hits}/100 signals, worst err {worst:.2e}")


def test_criterion_05_linear_robustness_of_tv(suite):
    pts = [p for p in suite["curves"]
           if p.method == "tv" and p.noise_kind == "adversarial"]
    fit = bench.fit_robustness_constant(pts)
    assert fit.r2 >= 0.95
    report(5, "linear worst-case growth",
           f"empirical C = {fit.slope:.3f}, r2 = {fit.r2:.4f}")


def test_criterion_06_adversarial_vs_statistical_gap(suite):
    gaps = []
    for name in suite["methods"]:
        adv = curve_lookup(suite["curves"], name, "adversarial")
        gau = curve_lookup(suite["curves"], name, "gaussian")
        for eta in ETA_GRID:
            assert adv[eta] >= gau[eta], (name, eta)
            gaps.append((name, eta, adv[eta] / gau[eta]))
    adv_tv = curve_lookup(suite["curves"], "tv", "adversarial")[0.06]
    gau_tv = curve_lookup(suite["curves"], "tv", "gaussian")[0.06]
    assert adv_tv >= 1.10 * gau_tv
    report(6, "worst-case above statistical",
           f"tv at 6%: {adv_tv:.4f} vs {gau_tv:.4f} ({adv_tv / gau_tv:.2f}x)")


def test_criterion_07_attack_feasibility_and_dominance(suite):
    assert suite["audit"], "no attacks ran"
    for entry in suite["audit"]:
        assert entry["e_norm"] <= entry["eta_abs"] * (1 + 1e-9)
        base = suite["baselines"][(entry["method"], entry["rel_noise"],
                                   entry["signal_idx"])]
        assert entry["achieved_error"] >= base - 1e-12, entry["method"]
    report(7, "attack feasibility and dominance",
           f"{len(suite['audit'])} perturbation searches audited")


@pytest.fixture(scope="module")
def ablation(ctx):
    A, tik, pool, test = ctx["A"], ctx["tik"], ctx["train"], ctx["test"]
    ynorm = float(np.linalg.norm((A.matrix @ pool.T).T, axis=1).mean())
    trained = {}
    for label, jitter in (("nojitter", 0.0), ("jitter", 0.20 * ynorm)):
        net = ReconNet("iterative", A, tik, seed=11, K=8)
        cfg = TrainConfig(epochs=30, batch_size=16, lr=1e-3,
                          weight_decay=1e-5, jitter_bound=jitter, seed=12)
        nets.train(net, pool[:600], A, cfg)
        trained[label] = NetMethod(net, f"iterative_{label}")

    errors = {label: {} for label in trained}
    from dataclasses import replace

    for rel in (0.10, 0.15):
        for label, method in trained.items():
            per_signal = []
            for si in range(10):
                x = test[si]
                eta = rel * np.linalg.norm(A.apply(x))
                cfg = replace(ATTACK, eta=eta, seed=900 + si)
                res = find_adversarial(method.attack_map(eta), A, x, cfg)
                per_signal.append(res.achieved_error)
            errors[label][rel] = np.array(per_signal)
    return errors


def test_criterion_08_jitter_ablation_direction(ablation):
    rel = 0.15  # largest tested level
    ratios = ablation["nojitter"][rel] / ablation["jitter"][rel]
    frac = float((ratios >= 1.3).mean())
    mean_ratio = float(np.mean(ablation["nojitter"][rel]) / np.mean(ablation["jitter"][rel]))
    assert frac >= 0.70, f"ratios {np.round(ratios, 2)}"
    report(8, "training noise prevents blow-up",
           f"at 15%: mean ratio {mean_ratio:.2f}, {frac * 100:.0f}% of signals >= 1.3x")


def test_criterion_09_statistical_noise_interchangeable(suite):
    gau = curve_lookup(suite["curves"], "tv", "gaussian")
    for kind in ("uniform", "bernoulli"):
        other = curve_lookup(suite["curves"], "tv", kind)
        for eta in ETA_GRID:
            assert abs(other[eta] - gau[eta]) <= 0.10 * gau[eta], (kind, eta)
    report(9, "statistical noise models interchangeable")


def test_criterion_10_classification_transition(tmp_path):
    config = {
        "schema_version": 1,
        "seed": 90,
        "operator_seed": 2024,
        "eta_grid": [0.05, 0.15, 0.30, 0.50],
        "n_signals": 20,
        "train": {"size": 1000, "epochs": 20, "jitter_bound": 0.08},
        "classify": {"rec": "postproc", "train_size": 1500, "epochs": 150,
                     "lr": 1e-2},
        "attack": {"steps": 60, "restarts": 3, "polish_steps": 30},
        "out": str(tmp_path / "classify"),
    }
    curve = bench.classification_experiment(config)
    accs = [acc for _, acc in curve]
    assert accs[0] >= 0.90, f"clean accuracy {accs[0]}"
    assert all(a >= b - 1e-12 for a, b in zip(accs, accs[1:])), accs
    assert min(accs) <= 0.50, accs
    report(10, "classification transition",
           " -> ".join(f"{100 * a:.0f}%" for a in accs))


def test_criterion_11_deterministic_csv_across_threads(tmp_path):
    base = {
        "schema_version": 1,
        "scenario": {"N": 32, "m": 16, "jumps_min": 2, "jumps_max": 3, "min_gap": 3},
        "methods": ["tv", "tikhonov"],
        "noise_kinds": ["adversarial", "gaussian"],
        "eta_grid": [0.01, 0.04],
        "draws": 4,
        "n_signals": 3,
        "train": {"size": 8, "epochs": 1},
        "attack": {"steps": 10, "restarts": 2, "polish_steps": 6},
        "admm": {"max_iters": 1200, "tol_primal": 1e-7, "tol_dual": 1e-7,
                 "unroll_iters": 8},
    }
    runs = []
    for threads, tag in ((1, "t1"), (3, "t3")):
        cfg = dict(base)
        cfg["out"] = str(tmp_path / tag)
        cfg["threads"] = threads
        runs.append(bench.run_experiment(cfg))
    for key in ("records", "curves", "fits"):
        assert runs[0].paths[key].read_bytes() == runs[1].paths[key].read_bytes(), key
    report(11, "byte-identical CSVs across thread counts")
