"""Renyi-DP accounting for the subsampled Gaussian mechanism.

Tracks per-order Renyi divergence under composition, converts to
(epsilon, delta) with the classic rule, and inverts the accounting to
calibrate a noise multiplier or a step budget. Integer orders only; all
sums are evaluated in log space so large orders never overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import (
    BudgetExhaustedError,
    CalibrationError,
    UnsupportedOrderError,
    ValidationError,
)

# Integer orders 2..64 cover tight conversion for every budget used here;
# the sparse tail keeps small-epsilon regimes honest.
DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (80, 96, 128, 192, 256)

STEP_CAP = 10**7
SIGMA_MAX = 1e4


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon >= 0):
            raise ValidationError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (0 < self.delta < 1):
            raise ValidationError(f"delta must be in (0, 1), got {self.delta}")


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    lo, hi = min(a, b), max(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """Per-step RDP of the Gaussian mechanism subsampled at rate q.

    Evaluates (1/(alpha-1)) * log sum_k C(alpha,k) (1-q)^(alpha-k) q^k
    exp(k(k-1)/(2 sigma^2)) for integer alpha >= 2. Reduces to
    alpha / (2 sigma^2) at q = 1 and to 0 at q = 0.
    """
    if isinstance(alpha, bool) or alpha != int(alpha):
        raise UnsupportedOrderError(
            f"only integer RDP orders are supported, got {alpha!r}")
    alpha = int(alpha)
    if alpha < 2:
        raise UnsupportedOrderError(f"order must be >= 2, got {alpha}")
    if not (0 <= q <= 1):
        raise ValidationError(f"sampling rate must be in [0, 1], got {q}")
    if not (sigma > 0):
        raise ValidationError(f"noise multiplier must be > 0, got {sigma}")

    if q == 0:
        return 0.0
    if q == 1:
        return alpha / (2 * sigma * sigma)

    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    log_sum = -math.inf
    for k in range(alpha + 1):
        log_coef = (
            math.lgamma(alpha + 1) - math.lgamma(k + 1) - math.lgamma(alpha - k + 1)
            + k * log_q + (alpha - k) * log_1mq
        )
        log_sum = _log_add(log_sum, log_coef + k * (k - 1) / (2 * sigma * sigma))
    return log_sum / (alpha - 1)


@dataclass(frozen=True)
class RdpLedger:
    """Cumulative per-order RDP of a (q, sigma) mechanism over `steps` steps."""

    q: float
    sigma: float
    orders: tuple[int, ...] = DEFAULT_ORDERS
    steps: int = 0
    per_step: tuple[float, ...] = field(default=None)  # filled in __post_init__

    def __post_init__(self):
        if len(self.orders) == 0:
            raise ValidationError("ledger needs at least one RDP order")
        if any(a <= 1 for a in self.orders):
            raise ValidationError("orders must be > 1")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ValidationError("orders must be strictly increasing")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.per_step is None:
            vals = tuple(rdp_subsampled_gaussian(self.q, self.sigma, a)
                         for a in self.orders)
            object.__setattr__(self, "per_step", vals)

    @property
    def rdp(self) -> tuple[float, ...]:
        return tuple(self.steps * v for v in self.per_step)


def compose(ledger: RdpLedger, additional_steps: int) -> RdpLedger:
    """Linear RDP composition: per-order values grow by steps * per-step."""
    if additional_steps < 0:
        raise ValidationError("additional_steps must be >= 0")
    return RdpLedger(q=ledger.q, sigma=ledger.sigma, orders=ledger.orders,
                     steps=ledger.steps + additional_steps,
                     per_step=ledger.per_step)


def to_eps_delta(ledger: RdpLedger, delta: float) -> tuple[PrivacyBudget, int]:
    """Classic RDP->DP conversion; returns the budget and the minimizing order."""
    if not (0 < delta < 1):
        raise ValidationError(f"delta must be in (0, 1), got {delta}")
    log_inv_delta = math.log(1 / delta)
    best_eps = math.inf
    best_alpha = None
    for alpha, r in zip(ledger.orders, ledger.rdp):
        eps = r + log_inv_delta / (alpha - 1)
        if eps < best_eps:
            best_eps = eps
            best_alpha = alpha
    return PrivacyBudget(epsilon=best_eps, delta=delta), best_alpha


def epsilon_after(q: float, sigma: float, steps: int, delta: float,
                  orders: tuple[int, ...] = DEFAULT_ORDERS) -> float:
    """Epsilon of `steps` compositions; convenience wrapper over the ledger."""
    ledger = compose(RdpLedger(q=q, sigma=sigma, orders=orders), steps)
    return to_eps_delta(ledger, delta)[0].epsilon


def calibrate_sigma(target: PrivacyBudget, q: float, total_steps: int,
                    orders: tuple[int, ...] = DEFAULT_ORDERS) -> float:
    """Smallest noise multiplier (1e-3 relative) meeting the target budget.

    Bisection over sigma; the returned value satisfies
    epsilon(total_steps) in [0.99 * target.epsilon, target.epsilon].
    """
    if not (0 < q <= 1):
        raise ValidationError(f"sampling rate must be in (0, 1], got {q}")
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")

    def eps(sig):
        return epsilon_after(q, sig, total_steps, target.delta, orders)

    lo = 1e-2
    hi = lo
    while eps(hi) > target.epsilon:
        hi *= 2.0
        if hi > SIGMA_MAX:
            raise CalibrationError(
                f"target epsilon={target.epsilon} unreachable with "
                f"sigma <= {SIGMA_MAX:g} (q={q}, steps={total_steps})")
    if eps(lo) <= target.epsilon:
        return lo  # even the smallest probe satisfies the budget
    while (hi - lo) > 1e-3 * hi:
        mid = 0.5 * (lo + hi)
        if eps(mid) <= target.epsilon:
            hi = mid
        else:
            lo = mid
    achieved = eps(hi)
    if not (0.99 * target.epsilon <= achieved <= target.epsilon):
        raise CalibrationError(
            f"bisection landed outside tolerance band: eps={achieved}")
    return hi


@dataclass(frozen=True)
class StepBudget:
    steps: int
    cap_reached: bool


def steps_until_budget(target: PrivacyBudget, q: float, sigma: float,
                       orders: tuple[int, ...] = DEFAULT_ORDERS,
                       cap: int = STEP_CAP) -> StepBudget:
    """Largest step count whose composed epsilon stays within the target.

    Raises BudgetExhaustedError when even a single step overshoots, so
    callers can abort with a clear message instead of training zero steps.
    """
    def eps(steps):
        return epsilon_after(q, sigma, steps, target.delta, orders)

    if eps(1) > target.epsilon:
        raise BudgetExhaustedError(
            f"budget epsilon={target.epsilon} is exhausted before the first "
            f"step (q={q}, sigma={sigma})")
    if eps(cap) <= target.epsilon:
        return StepBudget(steps=cap, cap_reached=True)
    lo, hi = 1, cap  # eps(lo) <= target < eps(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if eps(mid) <= target.epsilon:
            lo = mid
        else:
            hi = mid
    return StepBudget(steps=lo, cap_reached=False)
