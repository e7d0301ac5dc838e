"""Reconstruction-method adapters shared by the attack loop and benchmarks.

A method bundles a canonical (non-differentiable) reconstruction with a
factory for the differentiable map the perturbation search needs.  The
variational method re-tunes its noise budget to each requested level and
exposes warm-started unrolled iterations; network methods are already
explicit maps and ignore the level.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .errors import ConfigurationError
from .tv import AdmmConfig, AdmmState, TvProblem, tv_solve

__all__ = ["TvMethod", "NetMethod", "TikhonovMethod"]


class _TvAttackMap:
    """Differentiable unrolled solve with per-column warm states.

    ``refresh`` re-converges one full solve per column (warm-started
    from the previous refresh), so short unrolls stay anchored to the
    true solution as the perturbation moves.  Anchoring does not need
    the full solver tolerance, so refreshes run with a looser stopping
    rule than canonical evaluation.
    """

    def __init__(self, problem, cfg):
        self.problem = problem
        self.cfg = cfg
        self._refresh_cfg = replace(
            cfg,
            tol_primal=max(cfg.tol_primal, 1e-5),
            tol_dual=max(cfg.tol_dual, 1e-5),
            max_iters=min(cfg.max_iters, 2000),
        )
        self._eval_cfg = replace(
            cfg,
            tol_primal=max(cfg.tol_primal, 1e-7),
            tol_dual=max(cfg.tol_dual, 1e-7),
        )
        self._warm = None

    def refresh(self, y_cols):
        y_cols = np.atleast_2d(np.asarray(y_cols, dtype=np.float64))
        if y_cols.ndim == 1:
            y_cols = y_cols[:, None]
        R = y_cols.shape[1]
        states = []
        for j in range(R):
            warm_j = None
            if self._warm is not None and self._warm.x.ndim == 2 \
                    and self._warm.x.shape[1] == R:
                warm_j = AdmmState(
                    self._warm.x[:, j], self._warm.z[:, j], self._warm.u[:, j],
                    None if self._warm.w is None else self._warm.w[:, j],
                    None if self._warm.v is None else self._warm.v[:, j],
                )
            _, state, _ = tv_solve(self.problem, self._refresh_cfg, warm=warm_j,
                                   y=y_cols[:, j])
            states.append(state)
        stack = lambda arrs: np.stack(arrs, axis=1)
        self._warm = AdmmState(
            stack([s.x for s in states]),
            stack([s.z for s in states]),
            stack([s.u for s in states]),
            None if states[0].w is None else stack([s.w for s in states]),
            None if states[0].v is None else stack([s.v for s in states]),
        )

    def __call__(self, y_var):
        from .tv import tv_unrolled

        if self._warm is None:
            raise ConfigurationError("call refresh before the unrolled map")
        return tv_unrolled(self.problem, self.cfg, self._warm, y_var.tape, y=y_var)

    def evaluate(self, y):
        xhat, _, _ = tv_solve(self.problem, self._eval_cfg,
                              y=np.asarray(y, dtype=np.float64))
        return xhat


class TvMethod:
    """Gradient-sparsity recovery, re-tuned to each noise level."""

    def __init__(self, A, grad, cfg=None, name="tv"):
        self.A = A
        self.grad = grad
        self.cfg = cfg or AdmmConfig()
        self.name = name
        self._template = TvProblem(A, np.zeros(A.m), grad, "constrained", eta=0.0)

    def reconstruct(self, y, eta_abs=0.0):
        prob = self._template.replace(y=y, eta=float(eta_abs))
        xhat, _, _ = tv_solve(prob, self.cfg)
        return xhat

    def reconstruct_batch(self, Y, eta_abs=0.0):
        """Column-stacked measurements solved jointly (same level).

        The splitting iteration is column-separable, so one batched run
        is mathematically the independent per-column solves; only the
        (joint) stopping test couples them.
        """
        prob = self._template.replace(eta=float(eta_abs))
        xhat, _, _ = tv_solve(prob, self.cfg, y=np.asarray(Y, dtype=np.float64))
        return xhat

    def attack_map(self, eta_abs):
        prob = self._template.replace(eta=float(eta_abs))
        return _TvAttackMap(prob, self.cfg)


class _NetAttackMap:
    def __init__(self, net):
        self.net = net

    def __call__(self, y_var):
        return self.net.forward(y_var)

    def evaluate(self, y):
        return self.net.forward(np.asarray(y, dtype=np.float64))


class NetMethod:
    """A trained network as a reconstruction method (level-independent)."""

    def __init__(self, net, name=None):
        self.net = net
        self.name = name or net.kind

    def reconstruct(self, y, eta_abs=0.0):
        return self.net.forward(np.asarray(y, dtype=np.float64))

    def reconstruct_batch(self, Y, eta_abs=0.0):
        return self.net.forward(np.asarray(Y, dtype=np.float64))

    def attack_map(self, eta_abs):
        return _NetAttackMap(self.net)


class TikhonovMethod:
    """The bare regularized linear inversion, as a baseline method."""

    def __init__(self, tik, name="tikhonov"):
        self.tik = tik
        self.name = name

    def reconstruct(self, y, eta_abs=0.0):
        return self.tik.apply(y)

    def reconstruct_batch(self, Y, eta_abs=0.0):
        return self.tik.apply(np.asarray(Y, dtype=np.float64))

    def attack_map(self, eta_abs):
        from . import autodiff as ad

        matrix = self.tik.matrix

        class _Map:
            def __call__(self, y_var):
                return ad.matmul(matrix, y_var)

            def evaluate(self, y):
                return matrix @ np.asarray(y, dtype=np.float64)

        return _Map()
