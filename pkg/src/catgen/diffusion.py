"""Variance schedules, closed-form forward noising, and timestep sampling.

Timesteps are 1-based: t runs over [1, T]. The cumulative signal level
alpha_bar[t-1] is the product of (1 - beta) up to step t, accumulated in
extended precision so long schedules do not drift.

Three sampling strategies pick which timesteps each autoregressive step
trains on: ``full`` draws uniformly from [1, T]; ``fractional(n)`` draws from
an evenly spaced grid of floor(T/n) timesteps anchored so the grid always
contains T (the reverse process must be able to start at maximal noise);
``adaptive`` keeps the uniform candidate set but allocates more draws to
earlier AR steps, with weight decay**step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError


# -- sampling strategies --------------------------------------------------------


@dataclass(frozen=True)
class Full:
    pass


@dataclass(frozen=True)
class Fractional:
    n: int


@dataclass(frozen=True)
class Adaptive:
    decay: float = 0.8


Strategy = Full | Fractional | Adaptive


def parse_strategy(text: str) -> Strategy:
    """Parse ``full``, ``frac:<n>`` or ``adaptive[:<decay>]``."""
    body = text.strip().lower()
    if body == "full":
        return Full()
    if body.startswith("frac:"):
        try:
            return Fractional(int(body.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"bad fractional sampling spec {text!r}") from exc
    if body == "adaptive":
        return Adaptive()
    if body.startswith("adaptive:"):
        try:
            return Adaptive(float(body.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"bad adaptive sampling spec {text!r}") from exc
    raise ConfigError(f"unknown sampling strategy {text!r}")


def strategy_name(strategy: Strategy) -> str:
    if isinstance(strategy, Full):
        return "full"
    if isinstance(strategy, Fractional):
        return f"frac:{strategy.n}"
    return f"adaptive:{strategy.decay:g}"


# -- schedules --------------------------------------------------------------------


def _cumprod_extended(values: np.ndarray) -> np.ndarray:
    # extended-precision accumulation keeps alpha_bar honest for T in the thousands
    return np.cumprod(values.astype(np.longdouble)).astype(np.float64)


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @classmethod
    def from_betas(cls, betas, validate: bool = True) -> "DiffusionSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ShapeMismatchError("schedule needs a 1-D, non-empty beta sequence")
        if validate:
            if not ((betas > 0).all() and (betas < 1).all()):
                raise ShapeMismatchError("betas must lie in (0, 1)")
            if betas.size > 1 and not (np.diff(betas) > 0).all():
                raise ShapeMismatchError("betas must be strictly increasing")
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=_cumprod_extended(alphas))


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    """Linearly interpolated betas inclusive of both endpoints."""
    if T < 1:
        raise ShapeMismatchError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0 or (T > 1 and beta_start == beta_end):
        raise ShapeMismatchError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T)
    return DiffusionSchedule.from_betas(betas)


def _check_t(t: int, T: int) -> None:
    if not 1 <= t <= T:
        raise ShapeMismatchError(f"timestep {t} outside [1, {T}]")


def forward_sample(
    x0: np.ndarray, t: int, schedule: DiffusionSchedule, eps: np.ndarray
) -> np.ndarray:
    """Closed-form sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeMismatchError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    _check_t(t, schedule.T)
    ab = schedule.alpha_bars[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def noising_coefficients(
    schedule: DiffusionSchedule, ts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(sqrt(abar_t), sqrt(1 - abar_t)) for an array of 1-based timesteps."""
    ts = np.asarray(ts, dtype=np.int64)
    if ts.size and (ts.min() < 1 or ts.max() > schedule.T):
        raise ShapeMismatchError(f"timesteps outside [1, {schedule.T}]")
    ab = schedule.alpha_bars[ts - 1]
    return np.sqrt(ab), np.sqrt(1.0 - ab)


# -- timestep sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class TimestepPlan:
    strategy: Strategy
    per_ar_step_timesteps: tuple[np.ndarray, ...]


def candidate_grid(schedule: DiffusionSchedule, strategy: Strategy) -> np.ndarray:
    """Ascending candidate timesteps a strategy may draw from."""
    T = schedule.T
    if isinstance(strategy, Fractional):
        if strategy.n < 1 or strategy.n > T:
            raise ShapeMismatchError(f"fractional n={strategy.n} outside [1, T={T}]")
        count = T // strategy.n
        return T - strategy.n * np.arange(count - 1, -1, -1)
    return np.arange(1, T + 1)


def sample_timesteps(
    schedule: DiffusionSchedule,
    strategy: Strategy,
    n_ar_steps: int,
    rng: np.random.Generator,
    draws_per_step: int = 4,
) -> TimestepPlan:
    """Sample a multiset of training timesteps for each AR step.

    full/fractional give every AR step the same number of draws from their
    candidate grid; adaptive distributes the total budget across AR steps in
    proportion to decay**step, so earlier steps are sampled denser. Any AR
    step may come back empty under adaptive.
    """
    if n_ar_steps < 1:
        raise ShapeMismatchError("need at least one AR step")
    if draws_per_step < 1:
        raise ShapeMismatchError("need at least one draw per AR step")
    grid = candidate_grid(schedule, strategy)
    if isinstance(strategy, Adaptive):
        weights = strategy.decay ** np.arange(n_ar_steps)
        weights = weights / weights.sum()
        counts = rng.multinomial(draws_per_step * n_ar_steps, weights)
        per_step = tuple(np.sort(rng.choice(grid, size=int(k), replace=True)) for k in counts)
    else:
        per_step = tuple(
            np.sort(rng.choice(grid, size=draws_per_step, replace=True))
            for _ in range(n_ar_steps)
        )
    return TimestepPlan(strategy=strategy, per_ar_step_timesteps=per_step)


def respaced_chain(
    schedule: DiffusionSchedule, strategy: Strategy
) -> tuple[np.ndarray, DiffusionSchedule]:
    """Reverse-process chain for a strategy.

    Returns the ascending grid of raw timesteps the model is queried at and a
    derived schedule whose step k jumps between consecutive grid points, so
    the cumulative signal level at grid point k matches the base schedule
    exactly. full and adaptive keep the base chain.
    """
    if not isinstance(strategy, Fractional):
        return np.arange(1, schedule.T + 1), schedule
    grid = candidate_grid(schedule, strategy)
    ab = schedule.alpha_bars[grid - 1]
    ab_prev = np.concatenate(([1.0], ab[:-1]))
    betas = 1.0 - ab / ab_prev
    return grid, DiffusionSchedule.from_betas(betas, validate=False)
