"""State dynamics, admissibility, payoff and battery-regime criteria.

Conventions shared by every solver in the package:

* a :class:`TimeGrid` has ``N + 1`` nodes ``t_0 < ... < t_N``;
* controls are stored per node with shape ``(N + 1, m)``; the control held at
  the last node is never integrated (left-rectangle rule);
* the charge path is advanced with :func:`clipped_step` and the cumulative
  moving average uses the left-rectangle rule of :func:`cma`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

RATE_TOL = 1e-9
CHARGE_TOL = 1e-9  # multiplied by C


class InadmissibleControl(ValueError):
    """Raised when a control path violates the rate box or the capacity box."""


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int
    t0: float = 0.0

    def __post_init__(self):
        if not (self.N >= 1 and int(self.N) == self.N):
            raise ValueError(f"N must be a positive integer, got {self.N}")
        if not (0.0 <= self.t0 < self.T):
            raise ValueError(f"need 0 <= t0 < T, got t0={self.t0}, T={self.T}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.N + 1)

    def refine(self, substeps: int) -> "TimeGrid":
        return TimeGrid(T=self.T, N=self.N * int(substeps), t0=self.t0)


@dataclass(frozen=True)
class ModelParams:
    C: float
    L: float
    m: int = 1

    def __post_init__(self):
        if self.C <= 0 or self.L <= 0:
            raise ValueError("capacity C and rate bound L must be positive")
        if self.m < 1:
            raise ValueError("need at least one battery")


@dataclass(frozen=True)
class MarketPath:
    grid: TimeGrid
    xbar: np.ndarray  # (N + 1, n)

    def __post_init__(self):
        x = np.asarray(self.xbar, dtype=float)
        if x.ndim != 2 or x.shape[0] != self.grid.N + 1 or x.shape[1] < 2:
            raise GridMismatch(f"xbar must have shape (N+1, n>=2), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite latent factor values")
        object.__setattr__(self, "xbar", x)

    @property
    def p(self) -> np.ndarray:
        return np.exp(self.xbar[:, 0])

    @property
    def S(self) -> np.ndarray:
        return np.exp(self.xbar[:, 1])

    @classmethod
    def from_series(cls, grid: TimeGrid, p, S) -> "MarketPath":
        """Build a two-factor path from production and price series (both > 0)."""
        p = np.broadcast_to(np.asarray(p, dtype=float), (grid.N + 1,))
        S = np.broadcast_to(np.asarray(S, dtype=float), (grid.N + 1,))
        return cls(grid, np.column_stack([np.log(p), np.log(S)]))


@dataclass(frozen=True)
class ControlPath:
    grid: TimeGrid
    u: np.ndarray  # (N + 1, m); an (N, m) array is padded with a zero row

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if u.shape[0] == self.grid.N:
            u = np.vstack([u, np.zeros((1, u.shape[1]))])
        if u.shape[0] != self.grid.N + 1:
            raise GridMismatch(f"control has {u.shape[0]} rows for N={self.grid.N}")
        if not np.all(np.isfinite(u)):
            raise ValueError("control contains NaN or inf")
        object.__setattr__(self, "u", u)

    @property
    def m(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class BatteryPath:
    grid: TimeGrid
    y: np.ndarray  # (N + 1, m)
    ybar: np.ndarray  # (N + 1, m)


def _default_phi_hat(y, u, C, L):
    # negated product of U-shaped convex factors, minimal at the box corners
    fu = 1.0 + (u / L) ** 2
    fy = 1.0 + ((2.0 * y - C) / C) ** 2
    return -np.prod(fu * fy, axis=-1)


@dataclass(frozen=True)
class RegimeCriterion:
    """Battery-regime preference term ``phi = phi_hat(y, u) + gamma * sum_ij (y_i - ybar_j)^2``.

    ``phi_hat`` receives ``(y, u, C, L)`` with trailing battery axis and must
    return the reduced value; the default is the U-shape product.
    """

    gamma: float = 0.0
    use_phi_hat: bool = False
    phi_hat: Optional[Callable] = None

    @property
    def is_zero(self) -> bool:
        return self.gamma == 0.0 and not self.use_phi_hat

    @property
    def needs_cma(self) -> bool:
        return self.gamma != 0.0


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def clipped_step(y, u, dt: float, params: ModelParams) -> np.ndarray:
    """Advance charge levels by one step of the clipped dynamics.

    The Euler update is clamped into ``[0, C]``; for a constant rate this is
    the exact solution of ``dy/ds = u * 1{0 <= y <= C}`` at the step end.
    """
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(y, u)
    if np.any(np.abs(u) > params.L * (1 + RATE_TOL) + RATE_TOL):
        raise InadmissibleControl(f"rate outside [-L, L] with L={params.L}")
    return np.clip(y + u * dt, 0.0, params.C)


def integrate_charge(y0, u: np.ndarray, dt: float, C: float) -> np.ndarray:
    """Vectorised clipped integration; ``u`` has shape (..., N+1, m), returns same shape."""
    u = np.asarray(u, dtype=float)
    y = np.empty_like(u)
    y[..., 0, :] = y0
    for j in range(u.shape[-2] - 1):
        y[..., j + 1, :] = np.clip(y[..., j, :] + u[..., j, :] * dt, 0.0, C)
    return y


def cma(y, grid: Optional[TimeGrid] = None) -> np.ndarray:
    """Cumulative moving average along the node axis (axis -2 for 2-D input).

    Left-rectangle rule: node ``j`` holds ``sum_{d<j} y_d dt / (t_j - t0)``,
    and node 0 holds ``y_0``. On a uniform grid ``dt`` cancels, so ``grid``
    is only accepted for symmetry with the other path functions.
    """
    y = np.asarray(y, dtype=float)
    _check_finite(y)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    axis = y.ndim - 2
    n = y.shape[axis]
    csum = np.cumsum(y, axis=axis)
    out = np.empty_like(y)
    idx0 = [slice(None)] * y.ndim
    idx0[axis] = slice(0, 1)
    out[tuple(idx0)] = y[tuple(idx0)]
    if n > 1:
        rest = [slice(None)] * y.ndim
        rest[axis] = slice(1, None)
        prev = [slice(None)] * y.ndim
        prev[axis] = slice(0, n - 1)
        shape = [1] * y.ndim
        shape[axis] = n - 1
        counts = np.arange(1, n).reshape(shape)
        out[tuple(rest)] = csum[tuple(prev)] / counts
    return out[:, 0] if squeeze else out


def regime_penalty(y, ybar, u, crit: RegimeCriterion, t: float = 0.0,
                   params: Optional[ModelParams] = None) -> np.ndarray:
    """Evaluate ``phi_hat(y, u) + gamma * sum_{i,j} (y_i - ybar_j)^2``; broadcasts over leading axes."""
    y = np.asarray(y, dtype=float)
    ybar = np.asarray(ybar, dtype=float)
    u = np.asarray(u, dtype=float)
    out = np.zeros(np.broadcast_shapes(y.shape, ybar.shape, u.shape)[:-1])
    if crit.gamma != 0.0:
        diff = y[..., :, None] - ybar[..., None, :]
        out = out + crit.gamma * np.sum(diff ** 2, axis=(-2, -1))
    if crit.use_phi_hat:
        if params is None:
            raise ValueError("phi_hat needs ModelParams for C and L")
        fn = crit.phi_hat or _default_phi_hat
        out = out + fn(y, u, params.C, params.L)
    return out


@dataclass(frozen=True)
class Violation:
    node: int
    battery: int
    kind: str  # "rate", "sell" (sum of rates above production) or "capacity"
    value: float
    bound: float


def validate_control(control: ControlPath, market: MarketPath, y0,
                     params: ModelParams) -> list[Violation]:
    """List every rate-box and (un-clipped) capacity violation of ``control``."""
    if control.grid != market.grid:
        raise GridMismatch("control and market grids differ")
    u = control.u
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (u.shape[1],))
    _check_finite(u, y0)
    upper = np.minimum(market.p, params.L)[:, None]
    report: list[Violation] = []
    hi_bad = u > upper + RATE_TOL
    lo_bad = u < -params.L - RATE_TOL
    for j, i in zip(*np.nonzero(hi_bad | lo_bad)):
        bound = upper[j, 0] if hi_bad[j, i] else -params.L
        report.append(Violation(int(j), int(i), "rate", float(u[j, i]), float(bound)))
    if u.shape[1] > 1:
        # selling rate p - sum(u) is nonnegative; implied by the box when m = 1
        total = u.sum(axis=1)
        for j in np.nonzero(total > market.p + RATE_TOL)[0]:
            report.append(Violation(int(j), -1, "sell", float(total[j]), float(market.p[j])))
    dt = control.grid.dt
    y = y0 + np.vstack([np.zeros((1, u.shape[1])), np.cumsum(u[:-1] * dt, axis=0)])
    tol = CHARGE_TOL * params.C
    for j, i in zip(*np.nonzero((y < -tol) | (y > params.C + tol))):
        bound = 0.0 if y[j, i] < 0 else params.C
        report.append(Violation(int(j), int(i), "capacity", float(y[j, i]), bound))
    report.sort(key=lambda v: (v.node, v.battery, v.kind))
    return report


def project_rates(u, p, L: float) -> np.ndarray:
    """Clip rates (..., m) into ``[-L, min(p, L)]`` and scale down charging so that ``sum(u) <= p``."""
    p = np.asarray(p, dtype=float)[..., None]
    u = np.clip(np.asarray(u, dtype=float), -L, np.minimum(p, L))
    if u.shape[-1] > 1:
        excess = np.maximum(u.sum(axis=-1, keepdims=True) - p, 0.0)
        pos = np.maximum(u, 0.0)
        tot = pos.sum(axis=-1, keepdims=True)
        scale = np.where(tot > 0, excess / np.where(tot > 0, tot, 1.0), 0.0)
        u = u - pos * scale
    return u


def batch_payoff(p, S, u, y0, dt: float, params: ModelParams,
                 crit: RegimeCriterion = RegimeCriterion()):
    """Payoff of many paths at once under clipped semantics.

    ``p, S`` have shape (P, N+1), ``u`` (P, N+1, m). Returns ``(payoff, y, ybar)``.
    """
    p = np.asarray(p, dtype=float)
    S = np.asarray(S, dtype=float)
    u = np.asarray(u, dtype=float)
    y = integrate_charge(y0, u, dt, params.C)
    N = u.shape[-2] - 1
    income_on = np.all(y >= 0.0, axis=-1)
    income = (p - u.sum(axis=-1)) * S * income_on
    running = income[..., :N].sum(axis=-1) * dt
    ybar = None
    if not crit.is_zero:
        ybar = _cma_nodes(y)
        phi = regime_penalty(y[..., :N, :], ybar[..., :N, :], u[..., :N, :], crit, params=params)
        running = running + phi.sum(axis=-1) * dt
    total = running + S[..., N] * y[..., N, :].sum(axis=-1)
    if not np.all(np.isfinite(total)):
        raise FloatingPointError("non-finite payoff accumulation")
    return total, y, ybar


def _cma_nodes(y):
    # cma() on the node axis of a (..., N+1, m) array
    out = np.empty_like(y)
    out[..., 0, :] = y[..., 0, :]
    csum = np.cumsum(y, axis=-2)
    n = y.shape[-2]
    out[..., 1:, :] = csum[..., :-1, :] / np.arange(1, n)[:, None]
    return out


def payoff(market: MarketPath, control: ControlPath, y0, crit: RegimeCriterion,
           params: ModelParams, clipped: bool = False) -> float:
    """Realised payoff: selling income plus regime term plus terminal stock value.

    With ``clipped=False`` the control must be admissible (raises
    :class:`InadmissibleControl` otherwise). With ``clipped=True`` the control is
    evaluated under the clipped dynamics with the income indicator
    ``1{min_i y_i >= 0}``.
    """
    if control.grid != market.grid:
        raise GridMismatch("control and market grids differ")
    if not clipped:
        report = validate_control(control, market, y0, params)
        if report:
            raise InadmissibleControl(f"{len(report)} violations, first: {report[0]}")
    total, _, _ = batch_payoff(market.p, market.S, control.u, y0, market.grid.dt,
                               params, crit)
    return float(total)


def battery_path(control: ControlPath, y0, params: ModelParams) -> BatteryPath:
    y = integrate_charge(np.asarray(y0, dtype=float), control.u, control.grid.dt, params.C)
    return BatteryPath(control.grid, y, cma(y, control.grid))


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_path_csv(fileobj_or_path, market: MarketPath, control: ControlPath,
                   battery: BatteryPath) -> None:
    """CSV with columns t, p, S, u_1..u_m, y_1..y_m, ybar_1..ybar_m."""
    m = control.m
    header = (["t", "p", "S"] + [f"u_{i + 1}" for i in range(m)]
              + [f"y_{i + 1}" for i in range(m)] + [f"ybar_{i + 1}" for i in range(m)])
    rows = []
    for j, t in enumerate(market.grid.times):
        rows.append([fmt(t), fmt(market.p[j]), fmt(market.S[j])]
                    + [fmt(v) for v in control.u[j]]
                    + [fmt(v) for v in battery.y[j]]
                    + [fmt(v) for v in battery.ybar[j]])
    _write_rows(fileobj_or_path, header, rows)


def read_path_csv(path, grid: TimeGrid):
    """Inverse of :func:`write_path_csv`; returns (market, control, battery)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    m = sum(1 for h in header if h.startswith("u_"))
    market = MarketPath.from_series(grid, data[:, 1], data[:, 2])
    control = ControlPath(grid, data[:, 3:3 + m])
    battery = BatteryPath(grid, data[:, 3 + m:3 + 2 * m], data[:, 3 + 2 * m:3 + 3 * m])
    return market, control, battery


def _write_rows(fileobj_or_path, header: Sequence[str], rows) -> None:
    if hasattr(fileobj_or_path, "write"):
        w = csv.writer(fileobj_or_path, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    with open(fileobj_or_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
