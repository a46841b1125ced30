"""Finite-horizon closeness guarantees and their Monte Carlo validation."""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .config import DEFAULT_HORIZON, DEFAULT_SEED, DEFAULT_THREADS, MIN_TRIALS, WILSON_Z
from .network import ComposedRelation, CoupledNetwork, CoupledRuns

PASS = "PASS"
FAIL = "FAIL"
INFO = "INFO"

# How abstract event probabilities were obtained
EXACT = "exact"
SAMPLED = "sampled"


def gamma_of_horizon(delta: float, T: int) -> float:
    """gamma = 1 - (1 - delta)^(T + 1)."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if T < 0:
        raise ValueError(f"horizon must be nonnegative, got {T}")
    if delta == 1.0:
        return 1.0
    return float(min(1.0, max(0.0, -math.expm1((T + 1) * math.log1p(-delta)))))


@dataclass(frozen=True)
class ClosenessCertificate:
    """Output trajectories stay eps-close over [0, T] with probability at least 1 - gamma."""

    eps: float
    delta: float
    horizon: int
    gamma: float

    @classmethod
    def from_relation(cls, eps: float, delta: float, horizon: int) -> "ClosenessCertificate":
        return cls(eps, delta, horizon, gamma_of_horizon(delta, horizon))

    def to_dict(self) -> dict:
        return {"eps": self.eps, "delta": self.delta, "horizon": self.horizon, "gamma": self.gamma}


@dataclass(eq=False)
class EventTube:
    """Per-step axis-aligned boxes lower[k] <= y(k) <= upper[k], k = 0..T."""

    lower: np.ndarray
    upper: np.ndarray
    empty: bool = False

    def __post_init__(self):
        self.lower = np.atleast_2d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_2d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise ValueError(f"tube bounds differ in shape: {self.lower.shape} vs {self.upper.shape}")
        if not self.empty and np.any(self.lower > self.upper):
            raise ValueError("tube lower bound exceeds upper bound")

    @classmethod
    def constant(cls, lower, upper, horizon: int) -> "EventTube":
        """The same box at every step 0..horizon."""
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        return cls(np.tile(lower, (horizon + 1, 1)), np.tile(upper, (horizon + 1, 1)))

    @property
    def horizon(self) -> int:
        return self.lower.shape[0] - 1

    def restrict(self, columns: Sequence[int]) -> "EventTube":
        """The tube on a subset of output coordinates."""
        columns = list(columns)
        return EventTube(self.lower[:, columns], self.upper[:, columns], self.empty)

    def contains(self, outputs) -> np.ndarray:
        """Whether each output trajectory (..., T+1, q) lies in the tube; NaN outputs never do."""
        outputs = np.asarray(outputs, dtype=float)
        if self.empty:
            return np.zeros(outputs.shape[:-2], dtype=bool)
        with np.errstate(invalid="ignore"):
            inside = (outputs >= self.lower) & (outputs <= self.upper)
        return np.all(inside, axis=(-2, -1))


def expand_tube(tube: EventTube, eps: float) -> EventTube:
    """Inflate every face by eps; contains the Euclidean eps-expansion."""
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    if tube.empty:
        return tube
    return EventTube(tube.lower - eps, tube.upper + eps)


def contract_tube(tube: EventTube, eps: float) -> EventTube:
    """Deflate every face by eps; contained in the Euclidean eps-contraction."""
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    lower, upper = tube.lower + eps, tube.upper - eps
    if tube.empty or np.any(lower > upper):
        return EventTube(tube.lower, tube.upper, empty=True)
    return EventTube(lower, upper)


def bound_event_probability(cert: ClosenessCertificate, prob_contracted: float,
                            prob_expanded: float) -> Tuple[float, float]:
    """Bounds on the concrete event probability from the abstract contracted/expanded ones."""
    for p in (prob_contracted, prob_expanded):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {p}")
    lo = max(0.0, prob_contracted - cert.gamma)
    hi = min(1.0, prob_expanded + cert.gamma)
    assert lo <= hi, "contracted event cannot be more likely than the expanded one"
    return lo, hi


@dataclass(frozen=True)
class TwoStepBound:
    """Closeness of two chained approximations, (eps1, gamma1) then (eps2, gamma2)."""

    eps1: float
    gamma1: float
    eps2: float
    gamma2: float

    def __post_init__(self):
        for g in (self.gamma1, self.gamma2):
            if not 0.0 <= g < 1.0:
                raise ValueError(f"gamma must lie in [0, 1), got {g}")


def two_step_union_bound(b: TwoStepBound) -> Tuple[float, float]:
    """(eps1 + eps2, min(1, gamma1 + gamma2))."""
    return b.eps1 + b.eps2, min(1.0, b.gamma1 + b.gamma2)


def wilson_interval(successes: int, n: int, z: float = WILSON_Z) -> Tuple[float, float, float]:
    """Wilson score interval of a binomial proportion.

    Returns:
        (lower, upper, half width).
    """
    if n <= 0:
        raise ValueError("need at least one trial")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == n else min(1.0, center + half)
    return lo, hi, half


@dataclass
class MetricRecord:
    """One validation metric: name | theoretical | empirical | interval | verdict."""

    name: str
    theoretical: str
    empirical: str
    interval: str
    verdict: str


@dataclass
class ValidationReport:
    records: List[MetricRecord] = field(default_factory=list)
    runs: Optional[CoupledRuns] = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return all(r.verdict != FAIL for r in self.records)


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def monte_carlo_validate(pair: CoupledNetwork, composed: ComposedRelation, tube: Optional[EventTube] = None,
                         trials: int = 10000, seed: int = DEFAULT_SEED, horizon: int = DEFAULT_HORIZON,
                         threads: int = DEFAULT_THREADS,
                         abstract_event: Optional[Callable[[EventTube], float]] = None) -> ValidationReport:
    """Validate the composed guarantee with coupled shared-noise simulations.

    Reports relation retention over the horizon against (1 - delta)^(T+1),
    the largest output deviation on retained runs against eps, and, when a
    tube is given, the concrete event frequency against the transferred bounds.
    ``abstract_event`` computes abstract tube probabilities exactly on a
    finite abstraction; without it they are sampled from the abstract runs.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"at least {MIN_TRIALS} trials are needed, got {trials}")
    runs = pair.simulate(trials, horizon, seed, threads)
    cert = ClosenessCertificate.from_relation(composed.eps, composed.delta, horizon)
    records = []

    retained = runs.retained
    kept = int(retained.sum())
    lo, hi, half = wilson_interval(kept, trials)
    bound = 1.0 - cert.gamma
    freq = kept / trials
    records.append(MetricRecord("relation_retention", _fmt(bound), _fmt(freq), f"[{_fmt(lo)}, {_fmt(hi)}]",
                                PASS if freq >= bound - half else FAIL))
    records.append(MetricRecord("abstract_sink_exits", "0", str(int(runs.sink_hit.sum())), "-", INFO))

    deviations = runs.max_deviation[retained]
    worst = float(deviations.max()) if kept else 0.0
    within = int(np.sum(deviations <= composed.eps))
    records.append(MetricRecord("max_output_deviation", _fmt(composed.eps), _fmt(worst),
                                f"{within}/{kept} within", PASS if within == kept else FAIL))

    if tube is not None:
        if tube.horizon != horizon:
            raise ValueError(f"tube horizon {tube.horizon} differs from validation horizon {horizon}")
        contracted, expanded = contract_tube(tube, composed.eps), expand_tube(tube, composed.eps)
        if abstract_event is not None:
            method = EXACT
            p_contracted, p_expanded = abstract_event(contracted), abstract_event(expanded)
        else:
            method = SAMPLED
            p_contracted = float(np.mean(contracted.contains(runs.abstract_outputs)))
            p_expanded = float(np.mean(expanded.contains(runs.abstract_outputs)))
        ev_lo, ev_hi = bound_event_probability(cert, p_contracted, p_expanded)
        hits = int(np.sum(tube.contains(runs.outputs)))
        f_lo, f_hi, f_half = wilson_interval(hits, trials)
        event_freq = hits / trials
        verdict = PASS if ev_lo - f_half <= event_freq <= ev_hi + f_half else FAIL
        records.append(MetricRecord("abstract_event_contracted", "-", _fmt(p_contracted), method, INFO))
        records.append(MetricRecord("abstract_event_expanded", "-", _fmt(p_expanded), method, INFO))
        records.append(MetricRecord("concrete_event", f"[{_fmt(ev_lo)}, {_fmt(ev_hi)}]", _fmt(event_freq),
                                    f"[{_fmt(f_lo)}, {_fmt(f_hi)}]", verdict))

    return ValidationReport(records, runs)
