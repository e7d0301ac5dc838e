"""Worst-case measurement perturbations and statistical noise generators.

The search maximizes the reconstruction error of a differentiable
measurement-to-signal map over an L2 ball of perturbations: projected
gradient ascent driven by the shared Adam optimizer, restarted from
several random points in the ball (plus the zero perturbation, so the
result can never be worse than no attack).  All restarts run
column-stacked through one tape per step.

A reconstruction map is anything callable as ``rec(y_var)`` on a tape
variable holding (m, R) column-stacked measurements, returning an (N, R)
variable built from registered primitives.  Two optional hooks refine
the protocol:

* ``rec.refresh(y_cols)``  re-converges internal warm-start state at the
  given measurements (used by unrolled solvers, called every
  ``cfg.refresh_every`` steps);
* ``rec.evaluate(y)``      canonical single-vector evaluation used for the
  final scoring of candidates (defaults to running ``rec`` off-tape), so
  reported errors agree exactly with plain reconstruction runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError
from .optim import adam_init, adam_step

__all__ = [
    "AttackConfig",
    "AttackResult",
    "find_adversarial",
    "sample_statistical_noise",
    "margin_attack",
    "transfer_eval",
]


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 200
    lr: float | None = None  # defaults to eta / 10
    restarts: int = 5
    eta: float = 0.0
    include_zero_init: bool = True
    seed: int = 0
    refresh_every: int = 25
    polish_steps: int | None = None  # defaults to max(20, steps // 3)

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise ConfigurationError("steps and restarts must be >= 1")
        if self.eta < 0:
            raise ConfigurationError("eta must be >= 0")


@dataclass
class AttackResult:
    """Winning perturbation plus the bookkeeping of the search."""

    e_adv: np.ndarray
    achieved_error: float  # relative error, max over restarts
    per_restart_errors: list
    trace: list  # per-step relative errors of the winning restart
    predicted_class: int | None = None
    flipped: bool | None = None
    margin: float | None = None


def _project_columns(E, radius):
    nrm = np.linalg.norm(E, axis=0)
    scale = np.minimum(1.0, radius / np.maximum(nrm, np.finfo(float).tiny))
    return E * scale


def _ball_inits(m, count, radius, rng):
    """Uniform draws from the radius ball: normal direction, U^(1/m) radius."""
    g = rng.standard_normal((m, count))
    g /= np.maximum(np.linalg.norm(g, axis=0), np.finfo(float).tiny)
    r = radius * rng.random(count) ** (1.0 / m)
    return g * r


def _canonical(rec, y):
    if hasattr(rec, "evaluate"):
        return rec.evaluate(y)
    tape = ad.Tape()
    out = rec(tape.var(np.asarray(y, dtype=np.float64)[:, None]))
    out = out.data if isinstance(out, ad.Var) else out
    tape.release()
    return out[:, 0]


def _ascend(rec, objective, ybar, xbar_norm, cfg, extra_inits=None, trace_sign=1.0):
    """Shared projected-ascent loop; returns per-restart bookkeeping.

    ``objective(X_var, step_errors_out)`` maps the (N, R) reconstruction
    variable to a scalar to maximize and fills per-column scores used
    for candidate tracking.  Candidate scores are re-evaluated
    canonically at the end by the caller.
    """
    m = ybar.shape[0]
    rng = np.random.default_rng(cfg.seed)
    cols = []
    if cfg.include_zero_init:
        cols.append(np.zeros((m, 1)))
    cols.append(_ball_inits(m, cfg.restarts, cfg.eta, rng))
    if extra_inits is not None:
        extras = np.stack([np.asarray(e, dtype=np.float64) for e in extra_inits], axis=1)
        cols.append(_project_columns(extras, cfg.eta))
    E = np.concatenate(cols, axis=1)
    R = E.shape[1]
    init_E = E.copy()

    lr0 = cfg.lr if cfg.lr is not None else max(cfg.eta / 10.0, 1e-12)
    state = adam_init(E.shape, lr=lr0)
    best_score = np.full(R, -np.inf)
    best_E = E.copy()
    traces = [[] for _ in range(R)]

    def score_current(E_now, update_best=True):
        tape = ad.Tape()
        Ev = tape.var(E_now)
        X = rec(ad.add(Ev, ybar[:, None]))
        scores = np.empty(R)
        loss = objective(X, scores)
        if update_best:
            for r in range(R):
                if scores[r] > best_score[r]:
                    best_score[r] = scores[r]
                    best_E[:, r] = E_now[:, r]
        return tape, Ev, loss, scores

    refreshable = hasattr(rec, "refresh")
    for step in range(cfg.steps):
        if refreshable and step % cfg.refresh_every == 0:
            rec.refresh(ybar[:, None] + E)
        tape, Ev, loss, scores = score_current(E)
        g = tape.gradient(loss, Ev)
        tape.release()
        for r in range(R):
            traces[r].append(trace_sign * scores[r])
        E, state = adam_step(state, E, -g)  # ascent
        E = _project_columns(E, cfg.eta)

    # Polish phase: monotone projected ascent along the normalized
    # gradient with per-column adaptive steps (grow on improvement,
    # shrink and revert otherwise).  Adam's coordinate-wise scaling
    # explores well but its fixed points on the ball boundary are not
    # ascent-critical (for static gradient signs it degenerates to
    # diagonal sign steps); this hill-climb converges to a boundary
    # maximizer.
    polish = cfg.polish_steps if cfg.polish_steps is not None else max(20, cfg.steps // 3)
    tiny = np.finfo(float).tiny

    def grad_and_scores(E_now):
        tape, Ev, loss, scores = score_current(E_now)
        g = tape.gradient(loss, Ev)
        tape.release()
        return g / np.maximum(np.linalg.norm(g, axis=0), tiny), scores

    if polish > 0:
        if refreshable:
            rec.refresh(ybar[:, None] + E)
        gdir, cur_scores = grad_and_scores(E)
        step_len = np.full(R, lr0)
        for step in range(polish):
            if refreshable and (cfg.steps + 1 + step) % cfg.refresh_every == 0:
                rec.refresh(ybar[:, None] + E)
            proposal = _project_columns(E + step_len * gdir, cfg.eta)
            new_gdir, new_scores = grad_and_scores(proposal)
            for r in range(R):
                traces[r].append(trace_sign * new_scores[r])
            improved = new_scores > cur_scores
            E = np.where(improved, proposal, E)
            gdir = np.where(improved, new_gdir, gdir)
            cur_scores = np.where(improved, new_scores, cur_scores)
            step_len = np.where(improved, step_len * 1.25, step_len * 0.5)

    # score the final iterates too
    if refreshable:
        rec.refresh(ybar[:, None] + E)
    tape, _, _, _ = score_current(E)
    tape.release()
    return init_E, best_E, traces


def find_adversarial(rec, A, xbar, cfg, extra_inits=None):
    """Worst-case measurement perturbation for one signal.

    Maximizes the relative reconstruction error of ``rec`` at
    ``A xbar + e`` over the ``cfg.eta`` ball (``eta`` is an absolute
    measurement-domain radius here).  Every restart keeps both its
    starting point and its best in-search iterate as candidates; all
    candidates are re-scored with the canonical evaluator, which
    guarantees the reported error is never below the unperturbed one
    when the zero start is included.
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    ybar = A.apply(xbar)
    xnorm = np.linalg.norm(xbar)
    if xnorm == 0:
        raise ContractError("reference signal must be nonzero")

    def err_of(e):
        return float(np.linalg.norm(_canonical(rec, ybar + e) - xbar) / xnorm)

    if cfg.eta == 0.0:
        e0 = np.zeros(A.m)
        base = err_of(e0)
        return AttackResult(e0, base, [base], [base])

    def objective(X, scores_out):
        diff = ad.sub(X, xbar[:, None])
        scores_out[:] = np.linalg.norm(diff.data, axis=0) / xnorm
        return ad.sumsq(diff)  # squared objective is smoother; same argmax

    init_E, best_E, traces = _ascend(rec, objective, ybar, xnorm, cfg, extra_inits)
    R = best_E.shape[1]
    per_restart = []
    candidates = []
    for r in range(R):
        cand = [best_E[:, r]]
        if not np.array_equal(init_E[:, r], best_E[:, r]):
            cand.append(init_E[:, r])
        errs = [err_of(e) for e in cand]
        pick = int(np.argmax(errs))
        per_restart.append(errs[pick])
        candidates.append(cand[pick])
    winner = int(np.argmax(per_restart))
    return AttackResult(
        e_adv=candidates[winner].copy(),
        achieved_error=float(per_restart[winner]),
        per_restart_errors=[float(v) for v in per_restart],
        trace=[float(v) for v in traces[winner]],
    )


def sample_statistical_noise(kind, m, eta, rng):
    """Random measurement noise with E|e|^2 = eta^2 exactly.

    ``kind`` is "gaussian", "uniform", or "bernoulli" / "bernoulli:p"
    (default p = 0.025, entries +-eta/sqrt(m p) with probability p/2
    each).
    """
    if eta < 0:
        raise ConfigurationError("eta must be >= 0")
    if eta == 0:
        return np.zeros(m)
    if kind == "gaussian":
        return (eta / np.sqrt(m)) * rng.standard_normal(m)
    if kind == "uniform":
        a = eta * np.sqrt(3.0 / m)
        return rng.uniform(-a, a, size=m)
    if kind.startswith("bernoulli"):
        p = 0.025
        if ":" in kind:
            p = float(kind.split(":", 1)[1])
        if not (0.0 < p < 1.0):
            raise ConfigurationError(f"bernoulli p must be in (0, 1), got {p}")
        b = eta / np.sqrt(m * p)
        u = rng.random(m)
        return b * ((u < p / 2).astype(float) - ((u >= p / 2) & (u < p)).astype(float))
    raise ConfigurationError(f"unknown noise kind {kind!r}")


def margin_attack(pipeline, A, xbar, true_class, cfg, extra_inits=None):
    """Perturb measurements to flip a classification pipeline.

    ``pipeline`` maps column-stacked measurements to (R, K) class
    probabilities through registered primitives (``pipeline.evaluate``
    gives the canonical single-vector probabilities).  Maximizes the
    margin  max_{k != c} p_k - p_c  with the same projected-ascent
    machinery; reports the final predicted class and whether it moved
    off ``true_class``.
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    ybar = A.apply(xbar)
    c = int(true_class)

    def probs_of(e):
        if hasattr(pipeline, "evaluate"):
            p = np.asarray(pipeline.evaluate(ybar + e), dtype=np.float64)
        else:
            tape = ad.Tape()
            out = pipeline(tape.var(np.asarray(ybar + e, dtype=np.float64)[:, None]))
            p = out.data if isinstance(out, ad.Var) else out
            tape.release()
        return p[0] if p.ndim == 2 else p

    def margin_of(p):
        other = np.delete(p, c)
        return float(other.max() - p[c])

    if cfg.eta == 0.0:
        e0 = np.zeros(A.m)
        p = probs_of(e0)
        mg = margin_of(p)
        return AttackResult(e0, mg, [mg], [mg],
                            predicted_class=int(np.argmax(p)),
                            flipped=bool(np.argmax(p) != c), margin=mg)

    def objective(P, scores_out):
        probs = P.data  # (R, K)
        masked = probs.copy()
        masked[:, c] = -np.inf
        kstar = masked.argmax(axis=1)
        scores_out[:] = probs[np.arange(probs.shape[0]), kstar] - probs[:, c]
        picked = ad.pick_rows(P, kstar)
        true = ad.pick_rows(P, np.full(probs.shape[0], c))
        return ad.vsum(ad.sub(picked, true))

    init_E, best_E, traces = _ascend(pipeline, objective, ybar, 1.0, cfg, extra_inits)
    R = best_E.shape[1]
    per_restart = []
    candidates = []
    for r in range(R):
        cand = [best_E[:, r]]
        if not np.array_equal(init_E[:, r], best_E[:, r]):
            cand.append(init_E[:, r])
        margins = [margin_of(probs_of(e)) for e in cand]
        pick = int(np.argmax(margins))
        per_restart.append(margins[pick])
        candidates.append(cand[pick])
    winner = int(np.argmax(per_restart))
    e_adv = candidates[winner].copy()
    p_final = probs_of(e_adv)
    pred = int(np.argmax(p_final))
    return AttackResult(
        e_adv=e_adv,
        achieved_error=float(per_restart[winner]),
        per_restart_errors=[float(v) for v in per_restart],
        trace=[float(v) for v in traces[winner]],
        predicted_class=pred,
        flipped=bool(pred != c),
        margin=float(per_restart[winner]),
    )


def transfer_eval(e_adv, rec, A, xbar):
    """Relative error of a (possibly different) method on perturbed data."""
    xbar = np.asarray(xbar, dtype=np.float64)
    e_adv = np.asarray(e_adv, dtype=np.float64)
    if e_adv.shape[0] != A.m:
        raise ContractError("perturbation dimension does not match operator")
    y = A.apply(xbar) + e_adv
    xhat = _canonical(rec, y)
    return float(np.linalg.norm(xhat - xbar) / np.linalg.norm(xbar))
