"""Continuous surrogates for the boundary indicators and kernel mollification.

The charging indicator ``1{y <= C}`` and the income indicator ``1{y >= 0}``
are replaced by linear ramps of width ``eps``; :func:`mollify` convolves a
scalar function with the scaled bump kernel ``k(s) = 15/16 (1 - s^2)^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .model_core import ModelParams, RegimeCriterion, regime_penalty


def check_eps(eps: float, C: float) -> float:
    if not (0.0 < eps < C / 2):
        raise ValueError(f"eps must lie in (0, C/2) = (0, {C / 2}), got {eps}")
    return float(eps)


def charge_ramp(y, C: float, eps: float):
    """Factor multiplying a positive charging rate: 1 below ``C - eps``, 0 at and above ``C``."""
    y = np.asarray(y, dtype=float)
    return np.clip((C - y) / eps, 0.0, 1.0)


def income_ramp(y, eps: float):
    """Factor multiplying selling income: 0 at and below empty, 1 above ``eps``."""
    y = np.asarray(y, dtype=float)
    return np.clip(y / eps, 0.0, 1.0)


def f_tilde_eps(y, u, eps: float, C: float):
    """Smoothed charge rate: discharge untouched, charging ramped down to zero at ``C``."""
    u = np.asarray(u, dtype=float)
    return np.where(u > 0, u * charge_ramp(y, C, eps), u)


def h_tilde_eps(y, u, eps: float, p, S, phi=0.0):
    """Smoothed income rate ``(p - sum u) S prod_i ramp(y_i) + phi``.

    ``y`` and ``u`` carry a trailing battery axis; ``phi`` is added unscaled.
    """
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    factor = np.prod(income_ramp(y, eps), axis=-1)
    return (p - u.sum(axis=-1)) * S * factor + phi


def h_indicator(y, u, p, S, phi=0.0):
    """Unsmoothed income rate with the indicator ``1{min_i y_i >= 0}``."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    on = np.all(y >= 0.0, axis=-1)
    return (p - u.sum(axis=-1)) * S * on + phi


def f_indicator(y, u, C: float):
    u = np.asarray(u, dtype=float)
    return u * (np.asarray(y) <= C)


def bump(s):
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1.0, 15.0 / 16.0 * (1.0 - s * s) ** 2, 0.0)


@dataclass(frozen=True)
class MollifierKernel:
    """Bump kernel on [-1, 1] with Gauss-Legendre nodes for ``int f(s) k(s) ds``."""

    n_nodes: int = 32

    @property
    def rule(self):
        return _gauss_legendre(self.n_nodes)

    @property
    def mass(self) -> float:
        s, w = self.rule
        return float(np.sum(w * bump(s)))

    def weights_on(self, a: float, b: float):
        """Nodes and kernel-weighted weights on the sub-interval [a, b] of [-1, 1]."""
        s, w = self.rule
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        nodes = mid + half * s
        return nodes, half * w * bump(nodes)


@lru_cache(maxsize=8)
def _gauss_legendre(n):
    return np.polynomial.legendre.leggauss(n)


def mollify(fn: Callable, eps: float, points, kernel: MollifierKernel = MollifierKernel(),
            breakpoints: Optional[Sequence[float]] = None, cap: Optional[float] = None):
    """Approximate ``int fn(x - z) k_eps(z) dz`` at each point.

    ``breakpoints`` lists kinks or jumps of ``fn``; the kernel interval is split
    there, so piecewise polynomials of degree below ``2 * n_nodes - 4`` are
    integrated exactly. ``cap`` applies ``min(fn, cap)`` before convolution.
    """
    x = np.atleast_1d(np.asarray(points, dtype=float))
    out = np.empty_like(x)
    bps = np.asarray(sorted(breakpoints or []), dtype=float)
    for idx, xi in np.ndenumerate(x):
        # x - eps*s crosses breakpoint b at s = (x - b)/eps
        cuts = np.sort((xi - bps) / eps)
        cuts = cuts[(cuts > -1.0) & (cuts < 1.0)]
        edges = np.concatenate([[-1.0], cuts, [1.0]])
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            if b - a <= 0.0:
                continue
            s, wk = kernel.weights_on(a, b)
            vals = np.asarray(fn(xi - eps * s), dtype=float)
            if cap is not None:
                vals = np.minimum(vals, cap)
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError(f"non-finite sample of fn near x={xi}")
            total += float(np.sum(wk * vals))
        out[idx] = total
    return out


@dataclass(frozen=True)
class SmoothedModel:
    """Smoothed drift, running reward and terminal value fed to the HJB solver.

    With ``mollified=False`` the ramp surrogates are used directly. With
    ``mollified=True`` each ramp factor is convolved with the bump kernel along
    its battery coordinate and reward and terminal value are capped at ``1/eps``.
    """

    params: ModelParams
    eps: float
    crit: RegimeCriterion = RegimeCriterion()
    mollified: bool = False

    def __post_init__(self):
        check_eps(self.eps, self.params.C)

    def _factor(self, y, which):
        C, eps = self.params.C, self.eps
        if not self.mollified:
            return charge_ramp(y, C, eps) if which == "charge" else income_ramp(y, eps)
        y = np.asarray(y, dtype=float)
        if which == "charge":
            fn, bps = (lambda z: charge_ramp(z, C, eps)), [C - eps, C]
        else:
            fn, bps = (lambda z: income_ramp(z, eps)), [0.0, eps]
        flat = np.unique(y.ravel())
        vals = mollify(fn, eps, flat, breakpoints=bps)
        return vals[np.searchsorted(flat, y)]

    def drift(self, y, u):
        """Charge rate for every battery; ``y`` and ``u`` broadcast with trailing battery axis."""
        u = np.asarray(u, dtype=float)
        return np.where(u > 0, u * self._factor(y, "charge"), u)

    def reward(self, y, ybar, u, p, S, t: float = 0.0):
        factor = np.prod(self._factor(y, "income"), axis=-1)
        u = np.asarray(u, dtype=float)
        h = (p - u.sum(axis=-1)) * S * factor
        if not self.crit.is_zero:
            h = h + regime_penalty(y, ybar, u, self.crit, t, self.params)
        if self.mollified:
            h = np.minimum(h, 1.0 / self.eps)
        return h

    def terminal(self, S, y):
        val = S * np.sum(y, axis=-1)
        if self.mollified:
            val = np.minimum(val, 1.0 / self.eps)
        return val
