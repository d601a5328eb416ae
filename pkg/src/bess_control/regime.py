"""Monte-Carlo search for oscillating charge regimes.

Random bang-bang rate vectors with entries ``+L`` or ``-L`` are integrated
into charge paths clamped to ``[0, C]`` and scored by the summed squared
deviation of the charge from its running mean. The highest-scoring path is
reported.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .model_core import _write_rows, fmt

CHUNK = 256


@dataclass(frozen=True)
class ExperimentConfig:
    T: float = 1.0
    C: float = 1.0
    L: float = 100.0
    N: int = 1000
    n_paths: int = 2000
    seed: int = 0
    v0: float | None = None  # initial charge, defaults to C / 2

    def __post_init__(self):
        for name in ("T", "C", "L", "N", "n_paths"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if not 0.0 <= self.start <= self.C:
            raise ValueError(f"v0 must lie in [0, C], got {self.start}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def start(self) -> float:
        return self.C / 2 if self.v0 is None else float(self.v0)


@dataclass
class CandidatePath:
    index: int
    u: np.ndarray  # (N,)
    v: np.ndarray  # (N + 1,)
    score: float

    @property
    def vbar(self) -> np.ndarray:
        return running_mean(self.v)

    @property
    def sign_changes(self) -> int:
        return count_sign_changes(self.u)


def _signs(seed: int, index: int, N: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))
    return np.where(rng.random(N) < 0.5, -1.0, 1.0)


def random_binary_controls(cfg: ExperimentConfig, start: int = 0, stop: int | None = None):
    """Rows ``start..stop`` of the candidate set, shape (rows, N), entries ``+L`` or ``-L``.

    Row ``i`` depends only on ``(seed, i)``, so sets drawn with a larger
    ``n_paths`` extend smaller ones.
    """
    stop = cfg.n_paths if stop is None else stop
    return cfg.L * np.stack([_signs(cfg.seed, i, cfg.N) for i in range(start, stop)])


def integrate_candidate(u, cfg: ExperimentConfig, v0: float | None = None) -> np.ndarray:
    """Clamped cumulative charge, ``v_0 = v0`` and ``v_{j+1} = clip(v_j + u_j dt, 0, C)``.

    ``u`` may carry leading batch axes; the result has one more node than ``u``.
    """
    u = np.asarray(u, dtype=float)
    if np.any(np.abs(u) > cfg.L * (1 + 1e-12)):
        raise ValueError("rates must lie in [-L, L]")
    v = np.empty(u.shape[:-1] + (u.shape[-1] + 1,))
    v[..., 0] = cfg.start if v0 is None else v0
    for j in range(u.shape[-1]):
        v[..., j + 1] = np.clip(v[..., j] + u[..., j] * cfg.dt, 0.0, cfg.C)
    return v


def running_mean(v) -> np.ndarray:
    """Inclusive running mean ``vbar_j = (j + 1)^-1 sum_{d<=j} v_d`` along the last axis."""
    v = np.asarray(v, dtype=float)
    # centring on the first node keeps constant paths exactly constant
    v0 = v[..., :1]
    return v0 + np.cumsum(v - v0, axis=-1) / np.arange(1, v.shape[-1] + 1)


def criterion(v) -> np.ndarray:
    """Sum over nodes of the squared deviation from the inclusive running mean."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite charge path")
    return np.sum((v - running_mean(v)) ** 2, axis=-1)


def count_sign_changes(u) -> int:
    s = np.sign(np.asarray(u, dtype=float))
    s = s[s != 0]
    return int(np.sum(s[1:] != s[:-1]))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    best: CandidatePath
    scores: np.ndarray  # (n_paths,)

    def summary(self) -> dict:
        return {"best_index": self.best.index, "score": float(self.best.score),
                "sign_changes": self.best.sign_changes, "n_paths": int(self.scores.size),
                "mean_score": float(self.scores.mean()), **asdict(self.config)}


def run_experiment(cfg: ExperimentConfig = ExperimentConfig(), threads: int = 1) -> ExperimentResult:
    """Score every candidate and return the highest, lowest index winning ties."""
    starts = list(range(0, cfg.n_paths, CHUNK))

    def block(s):
        u = random_binary_controls(cfg, s, min(s + CHUNK, cfg.n_paths))
        return criterion(integrate_candidate(u, cfg))

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = np.concatenate(list(pool.map(block, starts)))
    else:
        scores = np.concatenate([block(s) for s in starts])
    i = int(np.argmax(scores))  # first maximum
    u = random_binary_controls(cfg, i, i + 1)[0]
    best = CandidatePath(i, u, integrate_candidate(u, cfg), float(scores[i]))
    return ExperimentResult(cfg, best, scores)


def write_best_path_csv(path, result: ExperimentResult) -> None:
    """Columns t, u, v, vbar on the N + 1 nodes; the last rate is written as 0."""
    cfg, best = result.config, result.best
    t = np.linspace(0.0, cfg.T, cfg.N + 1)
    u = np.append(best.u, 0.0)
    vbar = best.vbar
    rows = [[fmt(t[j]), fmt(u[j]), fmt(best.v[j]), fmt(vbar[j])] for j in range(cfg.N + 1)]
    _write_rows(path, ["t", "u", "v", "vbar"], rows)


def write_summary_csv(path, result: ExperimentResult) -> None:
    s = result.summary()
    rows = [[k, fmt(v) if isinstance(v, float) else str(v)] for k, v in s.items()]
    _write_rows(path, ["key", "value"], rows)
