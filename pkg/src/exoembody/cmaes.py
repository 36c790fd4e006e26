"""Box-constrained CMA-ES (minimization) with an ask/tell interface.

All arithmetic happens in coordinates normalized to the unit box so that
parameters of very different scales (gains, offsets) are searched evenly.
Candidates leaving the box are projected back; the squared projection
distance, weighted by ``penalty``, is added to their fitness.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyStateError, InvalidArgumentError, StallError


@dataclass(frozen=True)
class Bounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).ravel()
        hi = np.array(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape or lo.size == 0:
            raise InvalidArgumentError("bounds need matching non-empty lower/upper vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidArgumentError("bounds must be finite")
        if not np.all(lo < hi):
            raise InvalidArgumentError("lower bounds must be strictly below upper bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dimension(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_unit(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lower) / self.width

    def from_unit(self, y) -> np.ndarray:
        return self.lower + np.asarray(y, dtype=float) * self.width

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass(frozen=True)
class StrategyParams:
    lam: int
    mu: int
    weights: np.ndarray
    mueff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float

    @classmethod
    def default(cls, d: int, lam: int | None = None) -> "StrategyParams":
        if d < 1:
            raise InvalidArgumentError("dimension must be >= 1")
        lam = 4 + int(math.floor(3 * math.log(d))) if lam is None else int(lam)
        if lam < 4:
            raise InvalidArgumentError("population size must be >= 4")
        mu = lam // 2
        w = math.log((lam + 1) / 2) - np.log(np.arange(1, mu + 1))
        w = w / w.sum()
        mueff = 1.0 / float(np.sum(w ** 2))
        c_sigma = (mueff + 2) / (d + mueff + 5)
        d_sigma = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (d + 1)) - 1) + c_sigma
        c_c = (4 + mueff / d) / (d + 4 + 2 * mueff / d)
        c_1 = 2 / ((d + 1.3) ** 2 + mueff)
        c_mu = min(1 - c_1, 2 * (mueff - 2 + 1 / mueff) / ((d + 2) ** 2 + mueff))
        chi_n = math.sqrt(d) * (1 - 1 / (4 * d) + 1 / (21 * d * d))
        w.setflags(write=False)
        return cls(lam, mu, w, mueff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n)

    def eigen_interval(self, d: int) -> int:
        return max(1, math.ceil(1.0 / (10.0 * (self.c_1 + self.c_mu) * d)))


@dataclass
class AuditRow:
    generation: int
    index: int
    x: np.ndarray
    fitness: float
    penalty: float


@dataclass
class CmaState:
    bounds: Bounds
    params: StrategyParams
    mean: np.ndarray          # unit-box coordinates
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    eigen_basis: np.ndarray
    eigen_values: np.ndarray  # eigenvalues of C (floored)
    rng: np.random.Generator
    penalty: float = 1e3
    generation: int = 0
    eigen_generation: int = 0
    best_x: np.ndarray | None = None
    best_f: float = math.inf
    audit: list = field(default_factory=list)
    _pending: tuple | None = None   # (sampled unit points, repaired unit points)

    @property
    def dimension(self) -> int:
        return self.mean.size

    @property
    def mean_x(self) -> np.ndarray:
        return self.bounds.from_unit(self.mean)

    # -- ask / tell ---------------------------------------------------------
    def ask(self) -> list[np.ndarray]:
        if self._pending is None:
            d, lam = self.dimension, self.params.lam
            z = self.rng.standard_normal((lam, d))
            scale = self.eigen_basis * np.sqrt(self.eigen_values)
            sampled = self.mean + self.sigma * z @ scale.T
            self._pending = (sampled, np.clip(sampled, 0.0, 1.0))
        return [self.bounds.from_unit(y) for y in self._pending[1]]

    def tell(self, fitnesses) -> "CmaState":
        if self._pending is None:
            raise InvalidArgumentError("tell called before ask")
        sampled, repaired = self._pending
        p = self.params
        raw = np.asarray(fitnesses, dtype=float).ravel()
        if raw.size != p.lam:
            raise InvalidArgumentError(f"expected {p.lam} fitness values, got {raw.size}")
        finite = np.isfinite(raw)
        if not finite.any():
            raise StallError(f"generation {self.generation}: every fitness is non-finite")
        pen = self.penalty * np.sum((sampled - repaired) ** 2, axis=1)
        eff = np.where(finite, raw + pen, np.inf)
        for i in range(p.lam):
            self.audit.append(AuditRow(self.generation, i, self.bounds.from_unit(repaired[i]),
                                       float(raw[i]), float(pen[i])))
        ok = np.flatnonzero(finite)
        i_best = ok[np.argmin(raw[ok])]
        if raw[i_best] < self.best_f:
            self.best_f = float(raw[i_best])
            self.best_x = self.bounds.from_unit(repaired[i_best])

        if np.all(raw == raw[0]):
            # flat landscape: no ranking information, widen the search instead
            self.sigma *= math.exp(0.2 + p.c_sigma / p.d_sigma)
        else:
            self._update(sampled, np.argsort(eff, kind="stable"))
        self.generation += 1
        self._pending = None
        return self

    def _update(self, sampled: np.ndarray, order: np.ndarray) -> None:
        p = self.params
        d = self.dimension
        old = self.mean
        # the distribution is updated with the points actually sampled
        steps = (sampled[order[: p.mu]] - old) / self.sigma
        shift = p.weights @ steps
        self.mean = old + self.sigma * shift
        inv_sqrt = self.eigen_basis @ np.diag(1.0 / np.sqrt(self.eigen_values)) @ self.eigen_basis.T
        self.p_sigma = (1 - p.c_sigma) * self.p_sigma + math.sqrt(
            p.c_sigma * (2 - p.c_sigma) * p.mueff) * inv_sqrt @ shift
        norm_ps = float(np.linalg.norm(self.p_sigma))
        h_sigma = norm_ps / math.sqrt(1 - (1 - p.c_sigma) ** (2 * (self.generation + 1))) / p.chi_n \
            < 1.4 + 2 / (d + 1)
        self.p_c = (1 - p.c_c) * self.p_c + h_sigma * math.sqrt(p.c_c * (2 - p.c_c) * p.mueff) * shift
        rank_mu = (steps.T * p.weights) @ steps
        C = (1 - p.c_1 - p.c_mu) * self.C \
            + p.c_1 * (np.outer(self.p_c, self.p_c) + (not h_sigma) * p.c_c * (2 - p.c_c) * self.C) \
            + p.c_mu * rank_mu
        self.C = 0.5 * (C + C.T)
        self.sigma *= math.exp((p.c_sigma / p.d_sigma) * (norm_ps / p.chi_n - 1))
        if self.generation + 1 - self.eigen_generation >= p.eigen_interval(d):
            self.refresh_eigen()

    def refresh_eigen(self) -> None:
        vals, vecs = np.linalg.eigh(self.C)
        floor = 1e-14 * max(float(vals.max()), 1e-300)
        vals = np.maximum(vals, floor)
        self.eigen_basis, self.eigen_values = vecs, vals
        self.C = (vecs * vals) @ vecs.T
        self.C = 0.5 * (self.C + self.C.T)
        self.eigen_generation = self.generation + 1

    def recommend(self) -> tuple[np.ndarray, float]:
        if self.best_x is None:
            raise EmptyStateError("no generation has been evaluated yet")
        return self.best_x.copy(), self.best_f

    def write_audit(self, path) -> Path:
        path = Path(path)
        d = self.dimension
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["generation", "candidate", *(f"x{i}" for i in range(d)), "fitness", "penalty"])
            for r in self.audit:
                w.writerow([r.generation, r.index, *map(repr, map(float, r.x)), repr(r.fitness), repr(r.penalty)])
        return path


def init(x0, sigma0: float, bounds: Bounds, lam: int | None = None, seed: int = 0,
         penalty: float = 1e3) -> CmaState:
    """Start a search at ``x0``; ``sigma0`` is a fraction of the bound widths."""
    if not isinstance(bounds, Bounds):
        bounds = Bounds(*bounds)
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != bounds.lower.shape:
        raise InvalidArgumentError("x0 dimension does not match the bounds")
    if not bounds.contains(x0):
        raise InvalidArgumentError("x0 lies outside the bounds")
    if not (sigma0 > 0 and math.isfinite(sigma0)):
        raise InvalidArgumentError("sigma0 must be positive")
    d = x0.size
    params = StrategyParams.default(d, lam)
    return CmaState(bounds, params, bounds.to_unit(x0), float(sigma0), np.eye(d), np.zeros(d),
                    np.zeros(d), np.eye(d), np.ones(d), np.random.default_rng(seed), float(penalty))


def ask(state: CmaState) -> list[np.ndarray]:
    return state.ask()


def tell(state: CmaState, fitnesses) -> CmaState:
    return state.tell(fitnesses)


def recommend(state: CmaState) -> tuple[np.ndarray, float]:
    return state.recommend()


def minimize(f, x0, sigma0: float, bounds: Bounds, max_evals: int, target: float = -math.inf,
             lam: int | None = None, seed: int = 0) -> CmaState:
    """Plain serial loop: stop at ``max_evals`` evaluations or once ``target`` is reached."""
    state = init(x0, sigma0, bounds, lam, seed)
    evals = 0
    while evals + state.params.lam <= max_evals:
        xs = state.ask()
        state.tell([f(x) for x in xs])
        evals += len(xs)
        if state.best_f <= target:
            break
    return state
