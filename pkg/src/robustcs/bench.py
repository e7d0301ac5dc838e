"""Noise-to-error benchmarking: metrics, curves, ablations, and the runner.

Experiments are driven by a single versioned JSON configuration that
pins every seed, so a run is a pure function of its config: re-running
writes byte-identical CSVs, independent of the worker-thread count.
Work items (one reconstruction or one perturbation search) draw their
randomness from streams derived per (method, noise kind, signal, level,
draw), which also makes results invariant to the order of methods in
the config.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, find_adversarial, margin_attack, sample_statistical_noise
from .container import save_container
from .errors import ConfigurationError, ContractError
from .methods import NetMethod, TikhonovMethod, TvMethod
from .nets import Classifier, ReconNet, TrainConfig, classifier_train, load_net, train
from .operators import GradientOp1D, sample_gaussian_operator, tikhonov_inverse
from .signals import PiecewiseConstantSpec, load_idx_images, sample_piecewise_constant
from .tv import AdmmConfig

__all__ = [
    "CurvePoint",
    "CurveFit",
    "Record",
    "rel_error",
    "psnr",
    "noise_to_error_curve",
    "fit_robustness_constant",
    "ablate_jitter",
    "classification_accuracy_curve",
    "validate_config",
    "run_experiment",
]


def rel_error(xhat, xbar):
    """Relative recovery error |xhat - xbar| / |xbar|."""
    xhat = np.asarray(xhat, dtype=np.float64)
    xbar = np.asarray(xbar, dtype=np.float64)
    if xhat.shape != xbar.shape:
        raise ContractError("shapes must agree")
    denom = np.linalg.norm(xbar)
    if denom == 0:
        raise ContractError("reference signal must be nonzero")
    return float(np.linalg.norm(xhat - xbar) / denom)


def psnr(xhat, xbar, window=1.0):
    """Peak signal-to-noise ratio with the display window as peak, <= 99 dB."""
    xhat = np.asarray(xhat, dtype=np.float64)
    xbar = np.asarray(xbar, dtype=np.float64)
    if xhat.shape != xbar.shape:
        raise ContractError("shapes must agree")
    mse = float(np.mean((xhat - xbar) ** 2))
    if mse == 0:
        return 99.0
    value = 10.0 * np.log10(window * window / mse)
    return float(min(value, 99.0))


@dataclass(frozen=True)
class CurvePoint:
    rel_noise: float
    rel_error_mean: float
    rel_error_std: float
    method: str
    noise_kind: str
    n_signals: int
    n_draws: int


@dataclass(frozen=True)
class CurveFit:
    slope: float
    intercept: float
    r2: float


@dataclass(frozen=True)
class Record:
    scenario: str
    method: str
    noise_kind: str
    rel_noise: float
    signal_idx: int
    draw_idx: int
    rel_error: float
    psnr: float
    seed: int


def _name_key(name):
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")


def _item_seed(root, method, kind, sig, eta_idx, draw):
    ss = np.random.SeedSequence(
        root, spawn_key=(_name_key(method), _name_key(kind), sig, eta_idx, draw)
    )
    return ss


def noise_to_error_curve(method, signals, eta_grid, noise_kind, draws=1, *,
                         A=None, seed=0, attack_cfg=None, threads=1,
                         scenario="A1", psnr_window=1.0, records=None,
                         attack_audit=None):
    """Mean/std relative error of one method across noise levels.

    ``eta_grid`` holds relative levels; each signal's absolute budget is
    level * |A xbar|.  Statistical kinds average ``draws`` random
    perturbations per signal; the adversarial kind runs one perturbation
    search per (signal, level).  The variational method is re-tuned to
    every absolute level through its ``reconstruct(y, eta_abs)``
    contract.  Optional ``records`` / ``attack_audit`` lists collect raw
    rows for lossless reanalysis.
    """
    A = A if A is not None else getattr(method, "A", None)
    if A is None:
        raise ConfigurationError("an operator is required")
    signals = np.asarray(signals, dtype=np.float64)
    n_sig = signals.shape[0]
    base_attack = attack_cfg or AttackConfig(steps=100, restarts=3)
    if noise_kind != "adversarial" and draws < 1:
        raise ConfigurationError("statistical kinds need draws >= 1")

    # adversarial work items are one perturbation search per (level,
    # signal); statistical items bundle all draws of a (level, signal)
    # into one column-stacked reconstruction (the draws stay independent
    # and individually seeded)
    items = [(ei, si) for ei in range(len(eta_grid)) for si in range(n_sig)]

    ybars = [A.apply(signals[si]) for si in range(n_sig)]
    ynorms = [np.linalg.norm(y) for y in ybars]

    def run_item(item):
        ei, si = item
        eta_abs = float(eta_grid[ei]) * ynorms[si]
        if noise_kind == "adversarial":
            from dataclasses import replace

            ss = _item_seed(seed, method.name, noise_kind, si, ei, 0)
            seed_int = int(ss.generate_state(1)[0])
            cfg = replace(base_attack, eta=eta_abs, seed=seed_int)
            res = find_adversarial(method.attack_map(eta_abs), A, signals[si], cfg)
            p = psnr(method.reconstruct(ybars[si] + res.e_adv, eta_abs),
                     signals[si], psnr_window)
            audit = (np.linalg.norm(res.e_adv), eta_abs, res)
            return [(0, res.achieved_error, p, seed_int)], audit
        seeds = []
        noise_cols = []
        for di in range(draws):
            ss = _item_seed(seed, method.name, noise_kind, si, ei, di)
            seeds.append(int(ss.generate_state(1)[0]))
            rng = np.random.default_rng(ss)
            noise_cols.append(sample_statistical_noise(noise_kind, A.m, eta_abs, rng))
        Y = ybars[si][:, None] + np.stack(noise_cols, axis=1)
        Xhat = method.reconstruct_batch(Y, eta_abs)
        rows = []
        for di in range(draws):
            err = rel_error(Xhat[:, di], signals[si])
            p = psnr(Xhat[:, di], signals[si], psnr_window)
            rows.append((di, err, p, seeds[di]))
        return rows, None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_item, items))
    else:
        results = [run_item(it) for it in items]

    by_eta = {ei: [] for ei in range(len(eta_grid))}
    for (ei, si), (rows, audit) in zip(items, results):
        for di, err, p, seed_int in rows:
            by_eta[ei].append(err)
            if records is not None:
                records.append(Record(scenario, method.name, noise_kind,
                                      float(eta_grid[ei]), si, di, err, p, seed_int))
        if attack_audit is not None and audit is not None:
            enorm, eta_abs, res = audit
            attack_audit.append({
                "method": method.name, "rel_noise": float(eta_grid[ei]),
                "signal_idx": si, "e_norm": enorm, "eta_abs": eta_abs,
                "achieved_error": res.achieved_error,
                "per_restart_errors": res.per_restart_errors,
                "result": res,
            })

    points = []
    for ei, eta in enumerate(eta_grid):
        errs = np.array(by_eta[ei])
        points.append(CurvePoint(float(eta), float(errs.mean()),
                                 float(errs.std()), method.name, noise_kind,
                                 n_sig, 1 if noise_kind == "adversarial" else draws))
    return points


def _reconstruct(method, y, eta_abs):
    return method.reconstruct(y, eta_abs)


def fit_robustness_constant(curve):
    """Least-squares line through (level, mean error); slope is the
    empirical stability constant of the method."""
    if len(curve) < 3:
        raise ConfigurationError("need at least 3 curve points")
    x = np.array([p.rel_noise for p in curve])
    y = np.array([p.rel_error_mean for p in curve])
    if np.ptp(x) == 0:
        raise ConfigurationError("all noise levels are equal; nothing to fit")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)
    return CurveFit(float(slope), float(intercept), float(r2))


# ---------------------------------------------------------------------------
# configuration schema

_SCENARIO_SCHEMA = {
    "name": (str, "A1"),
    "N": (int, 256),
    "m": (int, 100),
    "jumps_min": (int, 2),
    "jumps_max": (int, 6),
    "amp_min": (float, 0.5),
    "amp_max": (float, 2.0),
    "min_gap": (int, 10),
    "images_path": ((str, type(None)), None),
    "labels_path": ((str, type(None)), None),
}

_TRAIN_SCHEMA = {
    "size": (int, 1000),
    "epochs": (int, 30),
    "batch_size": (int, 32),
    "lr": (float, 1e-3),
    "weight_decay": (float, 1e-5),
    "jitter_bound": (float, 0.08),  # relative to mean measurement norm
    "K": (int, 8),
}

_ATTACK_SCHEMA = {
    "steps": (int, 100),
    "restarts": (int, 3),
    "lr": ((float, type(None)), None),
    "refresh_every": (int, 25),
    "polish_steps": ((int, type(None)), None),
    "include_zero_init": (bool, True),
}

_ADMM_SCHEMA = {
    "rho": (float, 1.0),
    "max_iters": (int, 5000),
    "tol_primal": (float, 1e-8),
    "tol_dual": (float, 1e-8),
    "unroll_iters": (int, 25),
}

_CLASSIFY_SCHEMA = {
    "rec": (str, "postproc"),
    "train_size": (int, 1500),
    "epochs": (int, 150),
    "batch_size": (int, 32),
    "lr": (float, 1e-2),
    "weight_decay": (float, 0.0),
    # the classification study draws its own signals; adjacent jump
    # counts keep the parity labels learnable at desk scale
    "jumps_min": (int, 2),
    "jumps_max": (int, 3),
}

_CONFIG_SCHEMA = {
    "schema_version": (int, 1),
    "scenario": (_SCENARIO_SCHEMA, None),
    "operator_seed": (int, 0),
    "seed": (int, 0),
    "alpha": (float, 0.02),
    "methods": (list, ["tv"]),
    "noise_kinds": (list, ["adversarial", "gaussian"]),
    "eta_grid": (list, [0.005, 0.02, 0.06]),
    "draws": (int, 50),
    "n_signals": (int, 20),
    "psnr_window": (float, 1.0),
    "train": (_TRAIN_SCHEMA, None),
    "attack": (_ATTACK_SCHEMA, None),
    "admm": (_ADMM_SCHEMA, None),
    "classify": (_CLASSIFY_SCHEMA, None),
    "out": (str, "results"),
    "threads": (int, 1),
    "save_perturbations": (bool, False),
    "nets_dir": ((str, type(None)), None),
}

KNOWN_METHODS = ("tv", "tikhonov", "postproc", "fully_learned", "iterative")
KNOWN_KINDS = ("adversarial", "gaussian", "uniform", "bernoulli")


def _validate_section(schema, value, path):
    if not isinstance(value, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object")
    out = {}
    for key, entry in schema.items():
        spec, default = entry
        where = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = _validate_section(spec, value.get(key, {}), where)
            continue
        got = value.get(key, default)
        if spec is float and isinstance(got, int) and not isinstance(got, bool):
            got = float(got)
        if spec is int and isinstance(got, bool):
            raise ConfigurationError(f"{where}: expected int, got bool")
        if not isinstance(got, spec):
            raise ConfigurationError(
                f"{where}: expected {getattr(spec, '__name__', spec)}, "
                f"got {type(got).__name__}"
            )
        out[key] = got
    unknown = set(value) - set(schema)
    if unknown:
        where = f"{path}.{sorted(unknown)[0]}" if path else sorted(unknown)[0]
        raise ConfigurationError(f"unknown configuration key: {where}")
    return out


def validate_config(config):
    """Check a config document against schema v1 and fill defaults.

    Unknown keys are rejected with their full field path; validation
    happens before any computation.
    """
    cfg = _validate_section(_CONFIG_SCHEMA, config, "")
    if cfg["schema_version"] != 1:
        raise ConfigurationError(f"schema_version: unsupported version {cfg['schema_version']}")
    for name in cfg["methods"]:
        if name not in KNOWN_METHODS:
            raise ConfigurationError(f"methods: unknown method {name!r}")
    for kind in cfg["noise_kinds"]:
        if kind not in KNOWN_KINDS and not str(kind).startswith("bernoulli:"):
            raise ConfigurationError(f"noise_kinds: unknown noise kind {kind!r}")
    if any(float(v) < 0 for v in cfg["eta_grid"]):
        raise ConfigurationError("eta_grid: levels must be >= 0")
    return cfg


# ---------------------------------------------------------------------------
# experiment assembly


def _build_scenario(cfg):
    sc = cfg["scenario"]
    A = sample_gaussian_operator(sc["m"], sc["N"], seed=cfg["operator_seed"])
    D = GradientOp1D(sc["N"])
    tik = tikhonov_inverse(A, D, alpha=cfg["alpha"])
    if sc["images_path"]:
        images, labels = load_idx_images(sc["images_path"], sc["labels_path"])
        if images.shape[1] != sc["N"]:
            raise ConfigurationError(
                f"scenario.N = {sc['N']} but images have {images.shape[1]} pixels"
            )
        rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(1,)))
        order = rng.permutation(images.shape[0])
        test = images[order[: cfg["n_signals"]]]
        train_pool = images[order[cfg["n_signals"]:]]
    else:
        spec = PiecewiseConstantSpec(
            N=sc["N"], jumps_min=sc["jumps_min"], jumps_max=sc["jumps_max"],
            amp_min=sc["amp_min"], amp_max=sc["amp_max"], min_gap=sc["min_gap"],
        )
        rng_test = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(1,)))
        test = np.stack([sample_piecewise_constant(spec, rng_test)
                         for _ in range(cfg["n_signals"])])
        rng_train = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(2,)))
        train_pool = np.stack([sample_piecewise_constant(spec, rng_train)
                               for _ in range(cfg["train"]["size"])])
    return A, D, tik, test, train_pool


def _train_net(kind, A, tik, train_pool, cfg, jitter_override=None, seed_salt=0):
    tc = cfg["train"]
    ybar_norms = np.linalg.norm((A.matrix @ train_pool.T).T, axis=1)
    jitter_rel = tc["jitter_bound"] if jitter_override is None else jitter_override
    jitter_abs = float(jitter_rel * ybar_norms.mean())
    seed = int(np.random.SeedSequence(
        cfg["seed"], spawn_key=(_name_key(kind), 3, seed_salt)
    ).generate_state(1)[0])
    net = ReconNet(kind, A, tik, seed=seed, K=tc["K"])
    train_cfg = TrainConfig(
        epochs=tc["epochs"], batch_size=tc["batch_size"], lr=tc["lr"],
        weight_decay=tc["weight_decay"], jitter_bound=jitter_abs, seed=seed,
    )
    history = train(net, train_pool[: tc["size"]], A, train_cfg)
    return net, history


def _build_methods(cfg, A, D, tik, train_pool):
    admm = AdmmConfig(**cfg["admm"])
    methods = {}
    for name in cfg["methods"]:
        if name == "tv":
            methods[name] = TvMethod(A, D, admm)
        elif name == "tikhonov":
            methods[name] = TikhonovMethod(tik)
        else:
            if cfg["nets_dir"]:
                net = load_net(Path(cfg["nets_dir"]) / f"{name}.rxc", A)
            else:
                net, _ = _train_net(name, A, tik, train_pool, cfg)
            methods[name] = NetMethod(net, name)
    return methods


def _attack_config(cfg):
    at = cfg["attack"]
    return AttackConfig(
        steps=at["steps"], restarts=at["restarts"], lr=at["lr"],
        refresh_every=at["refresh_every"], polish_steps=at["polish_steps"],
        include_zero_init=at["include_zero_init"],
    )


# ---------------------------------------------------------------------------
# CSV and plot-script output


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def write_records_csv(path, records):
    header = ["scenario", "method", "noise_kind", "rel_noise", "signal_idx",
              "draw_idx", "rel_error", "psnr", "seed"]
    rows = [(r.scenario, r.method, r.noise_kind, r.rel_noise, r.signal_idx,
             r.draw_idx, r.rel_error, r.psnr, r.seed) for r in records]
    return _write_csv(path, header, rows)


def write_curves_csv(path, scenario, curves):
    header = ["scenario", "method", "noise_kind", "rel_noise",
              "rel_error_mean", "rel_error_std", "n_signals", "n_draws"]
    rows = [(scenario, p.method, p.noise_kind, p.rel_noise, p.rel_error_mean,
             p.rel_error_std, p.n_signals, p.n_draws) for p in curves]
    return _write_csv(path, header, rows)


def write_gnuplot_script(path, curves_csv, scenario, methods, noise_kind):
    """Plain-text plotting companion; no graphics dependency in the library."""
    lines = [
        f'# noise-to-error curve, scenario {scenario}, {noise_kind} noise',
        'set datafile separator ","',
        'set xlabel "relative noise level"',
        'set ylabel "mean relative error"',
        'set key left top',
        f'set title "{scenario}: {noise_kind} noise"',
    ]
    plots = []
    for name in methods:
        cond = f'(strcol(2) eq "{name}" && strcol(3) eq "{noise_kind}")'
        plots.append(
            f'"{curves_csv}" skip 1 using ($4):({cond} ? $5 : 1/0) '
            f'with linespoints title "{name}"'
        )
    lines.append("plot " + ", \\\n     ".join(plots))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# top-level flows


@dataclass
class ExperimentResult:
    curves: list
    records: list
    fits: dict
    attack_audit: list
    paths: dict


def run_experiment(config):
    """Run the configured noise-to-error study and write its CSV outputs.

    Returns an :class:`ExperimentResult`; everything written under
    ``config['out']`` is a deterministic function of the config.
    """
    cfg = validate_config(config)
    out = Path(cfg["out"])
    scenario = cfg["scenario"]["name"]
    A, D, tik, test, train_pool = _build_scenario(cfg)
    methods = _build_methods(cfg, A, D, tik, train_pool)
    attack_cfg = _attack_config(cfg)

    records, curves, audit = [], [], []
    fits = {}
    for name in cfg["methods"]:
        method = methods[name]
        for kind in cfg["noise_kinds"]:
            pts = noise_to_error_curve(
                method, test, cfg["eta_grid"], kind,
                draws=cfg["draws"], A=A, seed=cfg["seed"],
                attack_cfg=attack_cfg, threads=cfg["threads"],
                scenario=scenario, psnr_window=cfg["psnr_window"],
                records=records, attack_audit=audit,
            )
            curves.extend(pts)
            if len(pts) >= 3 and len({p.rel_noise for p in pts}) >= 2:
                fits[(name, kind)] = fit_robustness_constant(pts)

    paths = {
        "records": write_records_csv(out / "records.csv", records),
        "curves": write_curves_csv(out / "curves.csv", scenario, curves),
    }
    fit_rows = [
        (scenario, name, kind, fit.slope, fit.intercept, fit.r2)
        for (name, kind), fit in sorted(fits.items())
    ]
    paths["fits"] = _write_csv(
        out / "fits.csv",
        ["scenario", "method", "noise_kind", "slope", "intercept", "r2"],
        fit_rows,
    )
    for kind in cfg["noise_kinds"]:
        paths[f"plot_{kind}"] = write_gnuplot_script(
            out / f"curve_{kind}.gp", "curves.csv", scenario, cfg["methods"], kind
        )
    if cfg["save_perturbations"]:
        for entry in audit:
            pert = out / "perturbations" / (
                f"{entry['method']}_eta{entry['rel_noise']:g}_sig{entry['signal_idx']}.rxc"
            )
            save_container(pert, {"e_adv": entry["result"].e_adv}, {
                "method": entry["method"], "rel_noise": entry["rel_noise"],
                "signal_idx": entry["signal_idx"], "eta_abs": entry["eta_abs"],
                "achieved_error": entry["achieved_error"], "scenario": scenario,
            })
    return ExperimentResult(curves, records, fits, audit, paths)


def ablate_jitter(config, jitter_levels=(0.0, None)):
    """Train two otherwise-identical iterative nets and attack both.

    ``jitter_levels`` are relative measurement-noise bounds for training
    (None means the config value).  Returns the two adversarial curves,
    the per-level error ratio (no-jitter over jitter), and the raw
    per-signal errors at each level.
    """
    cfg = validate_config(config)
    A, D, tik, test, train_pool = _build_scenario(cfg)
    attack_cfg = _attack_config(cfg)

    nets_by_label = {}
    for label, jit in zip(("nojitter", "jitter"), jitter_levels):
        net, _ = _train_net("iterative", A, tik, train_pool, cfg, jitter_override=jit)
        nets_by_label[label] = NetMethod(net, f"iterative_{label}")

    out = {}
    per_signal = {}
    records = []
    for label, method in nets_by_label.items():
        recs = []
        pts = noise_to_error_curve(
            method, test, cfg["eta_grid"], "adversarial", A=A, seed=cfg["seed"],
            attack_cfg=attack_cfg, threads=cfg["threads"],
            scenario=cfg["scenario"]["name"], psnr_window=cfg["psnr_window"],
            records=recs,
        )
        out[label] = pts
        records.extend(recs)
        per_signal[label] = {
            float(eta): [r.rel_error for r in recs if r.rel_noise == float(eta)]
            for eta in cfg["eta_grid"]
        }

    ratios = {}
    for i, eta in enumerate(cfg["eta_grid"]):
        mean_no = out["nojitter"][i].rel_error_mean
        mean_jit = out["jitter"][i].rel_error_mean
        ratios[float(eta)] = float(mean_no / mean_jit) if mean_jit > 0 else float("inf")

    outdir = Path(cfg["out"])
    write_records_csv(outdir / "ablation_records.csv", records)
    write_curves_csv(outdir / "ablation_curves.csv", cfg["scenario"]["name"],
                     out["nojitter"] + out["jitter"])
    return out["jitter"], out["nojitter"], ratios, per_signal


def classification_accuracy_curve(pipeline, A, signals, labels, eta_grid,
                                  attack_cfg, seed=0):
    """Accuracy of a measurement-classification pipeline under attack.

    Levels are relative; per signal, the winning perturbation at each
    level seeds the next (nested-init protocol), which makes accuracy
    non-increasing in the level by construction.  Returns
    ``[(level, accuracy)]`` for the clean level 0 plus each grid level.
    """
    from dataclasses import replace

    signals = np.asarray(signals, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = signals.shape[0]
    correct = np.zeros((len(eta_grid) + 1, n), dtype=bool)
    for si in range(n):
        ybar = A.apply(signals[si])
        probs = np.asarray(pipeline.evaluate(ybar))
        probs = probs[0] if probs.ndim == 2 else probs
        pred = int(np.argmax(probs))
        correct[0, si] = pred == labels[si]
        prev = None
        for ei, eta in enumerate(eta_grid):
            eta_abs = float(eta) * np.linalg.norm(ybar)
            seed_int = int(_item_seed(seed, "classify", "adversarial", si, ei, 0)
                           .generate_state(1)[0])
            cfg = replace(attack_cfg, eta=eta_abs, seed=seed_int)
            extra = [prev] if prev is not None else None
            res = margin_attack(pipeline, A, signals[si], int(labels[si]), cfg,
                                extra_inits=extra)
            correct[ei + 1, si] = not res.flipped and correct[0, si]
            prev = res.e_adv
    levels = [0.0] + [float(e) for e in eta_grid]
    return [(lev, float(correct[i].mean())) for i, lev in enumerate(levels)]


class _ClassifyPipeline:
    """Differentiable composition: measurements -> net -> class probabilities."""

    def __init__(self, clf, net):
        self.clf = clf
        self.net = net

    def __call__(self, y_var):
        return self.clf.probabilities(self.net.forward(y_var))

    def evaluate(self, y):
        from . import autodiff as ad

        tape = ad.Tape()
        probs = self(tape.var(np.asarray(y, dtype=np.float64)))
        tape.release()
        return probs.data


def _parity_labels(signals):
    return (np.count_nonzero(np.diff(signals, axis=1), axis=1) % 2).astype(np.int64)


def classification_experiment(config):
    """The compressed-classification study on the synthetic scenario.

    Signals are labeled by the parity of their jump count; a small
    convolutional classifier is trained on clean reconstructions of the
    chosen method, then the classifier-through-reconstruction pipeline
    is attacked with the margin objective over the level grid.  Writes
    ``accuracy.csv`` and returns the [(level, accuracy)] curve.
    """
    cfg = validate_config(config)
    cl = cfg["classify"]
    if cl["rec"] not in ("postproc", "fully_learned", "iterative"):
        raise ConfigurationError(f"classify.rec: unsupported method {cl['rec']!r}")
    A, D, tik, _, train_pool = _build_scenario(cfg)
    if cfg["nets_dir"]:
        net = load_net(Path(cfg["nets_dir"]) / f"{cl['rec']}.rxc", A)
    else:
        net, _ = _train_net(cl["rec"], A, tik, train_pool, cfg)

    sc = cfg["scenario"]
    spec = PiecewiseConstantSpec(
        N=sc["N"], jumps_min=cl["jumps_min"], jumps_max=cl["jumps_max"],
        amp_min=sc["amp_min"], amp_max=sc["amp_max"], min_gap=sc["min_gap"],
    )
    rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"], spawn_key=(5,)))
    pool = np.stack([sample_piecewise_constant(spec, rng)
                     for _ in range(cl["train_size"])])
    test = np.stack([sample_piecewise_constant(spec, rng)
                     for _ in range(cfg["n_signals"])])

    Y = A.matrix @ pool.T
    recon = np.concatenate(
        [net.forward(Y[:, i : i + 128]).T for i in range(0, Y.shape[1], 128)]
    )
    labels = _parity_labels(pool)
    clf_seed = int(np.random.SeedSequence(cfg["seed"], spawn_key=(4,)).generate_state(1)[0])
    clf = Classifier(A.N, 2, seed=clf_seed)
    classifier_train(clf, recon, labels, TrainConfig(
        epochs=cl["epochs"], batch_size=cl["batch_size"], lr=cl["lr"],
        weight_decay=cl["weight_decay"], seed=clf_seed,
    ))

    pipeline = _ClassifyPipeline(clf, net)
    curve = classification_accuracy_curve(
        pipeline, A, test, _parity_labels(test), cfg["eta_grid"],
        _attack_config(cfg), seed=cfg["seed"],
    )
    _write_csv(Path(cfg["out"]) / "accuracy.csv",
               ["scenario", "rec", "rel_noise", "accuracy"],
               [(cfg["scenario"]["name"], cl["rec"], lev, acc) for lev, acc in curve])
    return curve


def transfer_from_container(config, perturbation_path, target_method):
    """Evaluate a stored perturbation under another reconstruction method.

    The scenario is rebuilt from the config (same seeds recreate the
    same signals), the stored metadata selects the signal and matched
    level, and the target method reconstructs from the perturbed
    measurements.  Appends a row to ``transfer.csv`` and returns it.
    """
    from .container import load_container

    cfg = validate_config(config)
    arrays, meta = load_container(perturbation_path)
    A, D, tik, test, train_pool = _build_scenario(cfg)
    methods = _build_methods({**cfg, "methods": [target_method]}, A, D, tik, train_pool)
    method = methods[target_method]
    si = int(meta["signal_idx"])
    xbar = test[si]
    eta_abs = float(meta["eta_abs"])
    xhat = method.reconstruct(A.apply(xbar) + arrays["e_adv"], eta_abs)
    row = {
        "scenario": cfg["scenario"]["name"],
        "source_method": meta["method"],
        "target_method": target_method,
        "rel_noise": float(meta["rel_noise"]),
        "signal_idx": si,
        "source_error": float(meta["achieved_error"]),
        "transfer_error": rel_error(xhat, xbar),
    }
    out = Path(cfg["out"]) / "transfer.csv"
    header = list(row)
    exists = out.exists()
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "a", encoding="utf-8", newline="\n") as fh:
        if not exists:
            fh.write(",".join(header) + "\n")
        fh.write(",".join(_fmt(v) for v in row.values()) + "\n")
    return row
