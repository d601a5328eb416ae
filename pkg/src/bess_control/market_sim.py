"""Euler-Maruyama simulation of the latent factor diffusion and its market image.

Drift and diffusion callables are vectorised: ``drift(x, t)`` takes ``x`` of
shape ``(P, n)`` and returns ``(P, n)``; ``diffusion(x, t)`` returns
``(P, n, n)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model_core import MarketPath, TimeGrid, _write_rows, fmt

CHUNK = 512  # fixed path chunking keeps results independent of thread count


class SimulationError(FloatingPointError):
    def __init__(self, msg, path=None, node=None):
        super().__init__(msg)
        self.path = path
        self.node = node


@dataclass(frozen=True)
class DiffusionSpec:
    """Latent factor SDE ``dx = drift(x, t) dt + diffusion(x, t) dW``.

    ``constant_factors`` lists factors with identically zero drift and
    diffusion rows; ``deterministic`` marks an identically zero diffusion.
    Presets fill both exactly; for custom callables they are inferred by
    :meth:`spot_check`.
    """

    x0: np.ndarray
    drift: Callable
    diffusion: Callable
    name: str = "custom"
    params: dict = field(default_factory=dict)
    deterministic: Optional[bool] = None
    constant_factors: Optional[tuple] = None

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        if x0.ndim != 1 or x0.size < 2:
            raise ValueError("need at least two latent factors (log p, log S)")
        object.__setattr__(self, "x0", x0)
        if self.deterministic is None or self.constant_factors is None:
            det, const = self.spot_check()
            if self.deterministic is None:
                object.__setattr__(self, "deterministic", det)
            if self.constant_factors is None:
                object.__setattr__(self, "constant_factors", const)

    @property
    def n(self) -> int:
        return self.x0.size

    def spot_check(self, n_points: int = 16, seed: int = 12345, growth: float = 1e3):
        """Sample drift/diffusion near ``x0``; check finiteness and linear growth."""
        rng = np.random.default_rng(seed)
        x = self.x0 + rng.normal(scale=2.0, size=(n_points, self.n))
        x[0] = self.x0
        det = True
        zero_rows = np.ones(self.n, dtype=bool)
        for t in (0.0, 0.5, 1.0):
            g = np.asarray(self.drift(x, t), dtype=float)
            b = np.asarray(self.diffusion(x, t), dtype=float)
            if g.shape != (n_points, self.n) or b.shape != (n_points, self.n, self.n):
                raise ValueError("drift/diffusion must be vectorised over a leading path axis")
            if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
                raise ValueError("drift or diffusion not finite near x0")
            size = np.abs(g).sum(axis=1) + np.abs(b).sum(axis=(1, 2))
            if np.any(size > growth * (np.abs(x).sum(axis=1) + 1.0)):
                raise ValueError("coefficients violate the linear-growth spot check")
            det &= bool(np.all(b == 0.0))
            zero_rows &= np.all(g == 0.0, axis=0) & np.all(b == 0.0, axis=(0, 2))
        return det, tuple(int(i) for i in np.nonzero(zero_rows)[0])


def constant_spec(x0, drift=None, vol=None) -> DiffusionSpec:
    """Constant drift vector and constant diffusion matrix (``vol`` vector means diagonal)."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    a = np.zeros(n) if drift is None else np.asarray(drift, dtype=float)
    B = _as_matrix(vol, n)
    return DiffusionSpec(
        x0, lambda x, t: np.broadcast_to(a, x.shape).copy(),
        lambda x, t: np.broadcast_to(B, (x.shape[0], n, n)).copy(),
        name="constant", params={"drift": a.tolist(), "vol": B.tolist()},
        deterministic=bool(np.all(B == 0)),
        constant_factors=tuple(int(i) for i in range(n) if a[i] == 0 and np.all(B[i] == 0)),
    )


def log_gbm_spec(x0, nu, sigma, corr=None) -> DiffusionSpec:
    """Brownian log-factors: ``p`` and ``S`` are geometric Brownian motions.

    ``E exp(x_i(T)) = exp(x0_i + nu_i T + sigma_i^2 T / 2)``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    nu = np.broadcast_to(np.asarray(nu, dtype=float), (n,)).copy()
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,)).copy()
    R = np.eye(n) if corr is None else np.asarray(corr, dtype=float)
    B = np.diag(sigma) @ np.linalg.cholesky(R)
    spec = constant_spec(x0, nu, B)
    return DiffusionSpec(spec.x0, spec.drift, spec.diffusion, name="log-gbm",
                         params={"nu": nu.tolist(), "sigma": sigma.tolist(),
                                 "corr": R.tolist()},
                         deterministic=spec.deterministic,
                         constant_factors=spec.constant_factors)


def affine_spec(x0, a, B, vol=None) -> DiffusionSpec:
    """Mean-reverting style drift ``a + B x`` with constant diffusion matrix."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    a = np.asarray(a, dtype=float).reshape(n)
    Bm = np.asarray(B, dtype=float).reshape(n, n)
    V = _as_matrix(vol, n)
    const = tuple(int(i) for i in range(n)
                  if a[i] == 0 and np.all(Bm[i] == 0) and np.all(V[i] == 0))
    return DiffusionSpec(
        x0, lambda x, t: a + x @ Bm.T,
        lambda x, t: np.broadcast_to(V, (x.shape[0], n, n)).copy(),
        name="affine", params={"a": a.tolist(), "B": Bm.tolist(), "vol": V.tolist()},
        deterministic=bool(np.all(V == 0)), constant_factors=const,
    )


PRESETS = {"constant": constant_spec, "log-gbm": log_gbm_spec, "affine": affine_spec}


def _as_matrix(vol, n):
    if vol is None:
        return np.zeros((n, n))
    v = np.asarray(vol, dtype=float)
    if v.ndim == 1:
        return np.diag(np.broadcast_to(v, (n,)))
    return v.reshape(n, n)


def to_market(xbar) -> tuple[np.ndarray, np.ndarray]:
    """Production and price series ``(exp(x_1), exp(x_2))`` from factor values (..., n)."""
    x = np.asarray(xbar, dtype=float)
    with np.errstate(over="ignore"):
        p = np.exp(x[..., 0])
        S = np.exp(x[..., 1])
    bad = ~(np.isfinite(p) & np.isfinite(S))
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise SimulationError(f"exp overflow at index {tuple(int(i) for i in idx)}",
                              node=int(idx[-1]) if idx.size else None)
    return p, S


@dataclass(frozen=True)
class PathEnsemble:
    """Immutable bundle of simulated factor paths and the Wiener increments behind them."""

    grid: TimeGrid
    xbar: np.ndarray  # (P, N + 1, n)
    dW: np.ndarray  # (P, N, n)
    seed: int
    scheme: str = "euler-maruyama"
    spec_name: str = "custom"

    def __post_init__(self):
        self.xbar.setflags(write=False)
        self.dW.setflags(write=False)

    def __len__(self):
        return self.xbar.shape[0]

    def __getitem__(self, i) -> MarketPath:
        return MarketPath(self.grid, self.xbar[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def paths(self) -> list[MarketPath]:
        return list(self)

    @property
    def p(self) -> np.ndarray:
        return np.exp(self.xbar[:, :, 0])

    @property
    def S(self) -> np.ndarray:
        return np.exp(self.xbar[:, :, 1])

    @property
    def W(self) -> np.ndarray:
        """Wiener paths on the nodes, shape (P, N + 1, n), starting at zero."""
        P, N, n = self.dW.shape
        out = np.zeros((P, N + 1, n))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def subset(self, n_paths: int) -> "PathEnsemble":
        return PathEnsemble(self.grid, self.xbar[:n_paths].copy(), self.dW[:n_paths].copy(),
                            self.seed, self.scheme, self.spec_name)


def path_increments(seed: int, index: int, N: int, n: int, dt: float) -> np.ndarray:
    """Wiener increments of path ``index``; independent of how many paths are drawn."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.default_rng(ss).standard_normal((N, n)) * np.sqrt(dt)


def euler_maruyama(spec: DiffusionSpec, grid: TimeGrid, dW: np.ndarray,
                   first_index: int = 0) -> np.ndarray:
    """Integrate the factor SDE for a block of increments ``dW`` (P, N, n)."""
    P, N, n = dW.shape
    x = np.empty((P, N + 1, n))
    x[:, 0] = spec.x0
    t = grid.times
    dt = grid.dt
    for j in range(N):
        g = np.asarray(spec.drift(x[:, j], t[j]), dtype=float)
        b = np.asarray(spec.diffusion(x[:, j], t[j]), dtype=float)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
            bad = np.nonzero(~(np.isfinite(g).all(axis=1) & np.isfinite(b).all(axis=(1, 2))))[0]
            raise SimulationError(
                f"non-finite drift/diffusion at path {first_index + int(bad[0])}, node {j}",
                path=first_index + int(bad[0]), node=j)
        x[:, j + 1] = x[:, j] + g * dt + np.einsum("pkl,pl->pk", b, dW[:, j])
        if not np.all(np.isfinite(x[:, j + 1])):
            raise SimulationError(f"factor overflow at node {j + 1}", node=j + 1)
    return x


def deterministic_path(spec: DiffusionSpec, grid: TimeGrid) -> np.ndarray:
    """Factor path with zero noise, shape (N + 1, n)."""
    return euler_maruyama(spec, grid, np.zeros((1, grid.N, spec.n)))[0]


def simulate(spec: DiffusionSpec, grid: TimeGrid, n_paths: int, seed: int,
             threads: int = 1) -> PathEnsemble:
    """Simulate ``n_paths`` Euler-Maruyama paths; path ``i`` depends only on ``(seed, i)``."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    N, n, dt = grid.N, spec.n, grid.dt
    starts = list(range(0, n_paths, CHUNK))

    def block(s):
        stop = min(s + CHUNK, n_paths)
        dW = np.stack([path_increments(seed, i, N, n, dt) for i in range(s, stop)])
        return euler_maruyama(spec, grid, dW, first_index=s), dW

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block, starts))
    else:
        parts = [block(s) for s in starts]
    xbar = np.concatenate([p[0] for p in parts])
    dW = np.concatenate([p[1] for p in parts])
    to_market(xbar)  # positivity/overflow check
    return PathEnsemble(grid, xbar, dW, seed=seed, spec_name=spec.name)


def write_ensemble_csv(path, ensemble: PathEnsemble) -> None:
    """Long format: path_id, t, x_1..x_n, p, S."""
    n = ensemble.xbar.shape[2]
    header = ["path_id", "t"] + [f"x_{k + 1}" for k in range(n)] + ["p", "S"]
    times = ensemble.grid.times
    p, S = ensemble.p, ensemble.S
    rows = []
    for i in range(len(ensemble)):
        for j, t in enumerate(times):
            rows.append([str(i), fmt(t)] + [fmt(v) for v in ensemble.xbar[i, j]]
                        + [fmt(p[i, j]), fmt(S[i, j])])
    _write_rows(path, header, rows)


def spec_from_config(cfg: dict) -> DiffusionSpec:
    """Build a preset from a ``market`` config section."""
    preset = cfg.get("preset", "log-gbm")
    x0 = cfg.get("x0", [0.0, 0.0])
    if preset == "constant":
        return constant_spec(x0, cfg.get("drift"), cfg.get("vol"))
    if preset == "log-gbm":
        return log_gbm_spec(x0, cfg.get("nu", 0.0), cfg.get("sigma", 0.0), cfg.get("corr"))
    if preset == "affine":
        n = len(x0)
        return affine_spec(x0, cfg.get("a", [0.0] * n), cfg.get("B", np.zeros((n, n))),
                           cfg.get("vol"))
    raise KeyError(f"unknown market preset {preset!r}; choose from {sorted(PRESETS)}")
