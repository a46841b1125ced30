"""Concrete and reduced-order stochastic nonlinear systems and their simulation.

A system is the tuple (A, B, C, D, E, F, R, phi) evolving as

    x(k+1) = A x(k) + E phi(F x(k)) + D w(k) + B nu(k) + R zeta(k)
    y(k)   = C x(k)

with w the internal input (used for interconnection), nu the external input
(used by controllers) and zeta a standard normal vector of dimension s, the
number of columns of R.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, ProviderError

NONLINEARITY_TAGS = ("zero", "identity", "sine", "pwl")

InputProvider = Union[None, np.ndarray, Callable[[int, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class NonlinearityDescriptor:
    """Scalar nonlinearity from a closed tag set with sector slope bounds.

    phi(s) = base(s) - linear * s, where base is selected by ``tag``:
    zero, identity (scale * s), sine (scale * sin(s)) or pwl (piecewise
    linear through ``breakpoints``/``values``, extended linearly).
    """

    tag: str = "zero"
    slope_lo: float = 0.0
    slope_hi: float = 1.0
    scale: float = 1.0
    breakpoints: Tuple[float, ...] = ()
    values: Tuple[float, ...] = ()
    linear: float = 0.0

    def __post_init__(self):
        if self.tag not in NONLINEARITY_TAGS:
            raise ValueError(f"unknown nonlinearity tag '{self.tag}', expected one of {NONLINEARITY_TAGS}")
        if self.slope_lo > self.slope_hi:
            raise ValueError(f"slope_lo {self.slope_lo} exceeds slope_hi {self.slope_hi}")
        if self.tag == "pwl":
            if len(self.breakpoints) < 2 or len(self.breakpoints) != len(self.values):
                raise ValueError("pwl nonlinearity needs at least two breakpoints with matching values")
            if not all(x0 < x1 for x0, x1 in zip(self.breakpoints[:-1], self.breakpoints[1:])):
                raise ValueError("pwl breakpoints must be strictly increasing")

    @classmethod
    def zero(cls) -> "NonlinearityDescriptor":
        return cls("zero", 0.0, 1.0)

    @classmethod
    def identity(cls, scale: float = 1.0) -> "NonlinearityDescriptor":
        return cls("identity", scale, scale, scale=scale)

    @classmethod
    def sine(cls, scale: float = 1.0, slope_lo: Optional[float] = None,
             slope_hi: Optional[float] = None) -> "NonlinearityDescriptor":
        lo = -abs(scale) if slope_lo is None else slope_lo
        hi = abs(scale) if slope_hi is None else slope_hi
        return cls("sine", lo, hi, scale=scale)

    @classmethod
    def piecewise_linear(cls, breakpoints: Sequence[float], values: Sequence[float]) -> "NonlinearityDescriptor":
        xs = tuple(float(v) for v in breakpoints)
        ys = tuple(float(v) for v in values)
        slopes = np.diff(ys) / np.diff(xs)
        return cls("pwl", float(slopes.min()), float(slopes.max()), breakpoints=xs, values=ys)

    @property
    def is_zero(self) -> bool:
        return self.tag == "zero" and self.linear == 0.0

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.tag == "zero":
            base = np.zeros_like(s)
        elif self.tag == "identity":
            base = self.scale * s
        elif self.tag == "sine":
            base = self.scale * np.sin(s)
        else:
            xs = np.asarray(self.breakpoints)
            ys = np.asarray(self.values)
            base = np.interp(s, xs, ys)
            left = (ys[1] - ys[0]) / (xs[1] - xs[0])
            right = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
            base = np.where(s < xs[0], ys[0] + left * (s - xs[0]), base)
            base = np.where(s > xs[-1], ys[-1] + right * (s - xs[-1]), base)
        if self.linear:
            return base - self.linear * s
        return base

    def max_abs_slope(self) -> float:
        """Largest |slope| admitted by the sector bounds."""
        return max(abs(self.slope_lo), abs(self.slope_hi))

    def slope_violation(self, lower: float = -10.0, upper: float = 10.0, samples: int = 2001) -> float:
        """Largest amount by which sampled difference quotients leave [slope_lo, slope_hi]."""
        grid = np.linspace(lower, upper, samples)
        vals = self(grid)
        quotients = np.diff(vals) / np.diff(grid)
        above = quotients - self.slope_hi if math.isfinite(self.slope_hi) else np.zeros(1)
        below = self.slope_lo - quotients if math.isfinite(self.slope_lo) else np.zeros(1)
        return float(max(0.0, np.max(above), np.max(below)))


def _as_matrix(value, name: str, rows: Optional[int] = None, cols: Optional[int] = None) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        # Bare vectors are columns unless the expected shape says otherwise
        if rows == 1:
            arr = arr.reshape(1, -1)
        else:
            arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(name, "matrix", arr.shape)
    if rows is not None and arr.shape[0] != rows and arr.size > 0:
        raise DimensionError(name, (rows, cols), arr.shape)
    if cols is not None and arr.shape[1] != cols and arr.size > 0:
        raise DimensionError(name, (rows, cols), arr.shape)
    if arr.size == 0:
        arr = arr.reshape(rows if rows is not None else 0, cols if cols is not None else 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NonlinearSystemTuple:
    """The tuple (A, B, C, D, E, F, R, phi) of a stochastic control system."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    R: np.ndarray
    phi: NonlinearityDescriptor = field(default_factory=NonlinearityDescriptor.zero)

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError("A", (n, n), A.shape)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", _as_matrix(self.B, "B", rows=n))
        object.__setattr__(self, "C", _as_matrix(self.C, "C", cols=n) if np.ndim(self.C) != 1
                           else _as_matrix(self.C, "C", rows=1, cols=n))
        object.__setattr__(self, "D", _as_matrix(self.D, "D", rows=n))
        object.__setattr__(self, "E", _as_matrix(self.E, "E", rows=n, cols=1))
        object.__setattr__(self, "F", _as_matrix(self.F, "F", rows=1, cols=n))
        object.__setattr__(self, "R", _as_matrix(self.R, "R", rows=n))

    @classmethod
    def linear(cls, A, B, C, D, R) -> "NonlinearSystemTuple":
        """Linear tuple (A, B, C, D, R) with a zero nonlinearity."""
        n = np.atleast_2d(np.asarray(A, dtype=float)).shape[0]
        return cls(A, B, C, D, np.zeros((n, 1)), np.zeros((1, n)), R, NonlinearityDescriptor.zero())

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.D.shape[1]

    @property
    def q(self) -> int:
        return self.C.shape[0]

    @property
    def s(self) -> int:
        return self.R.shape[1]

    @property
    def dims(self) -> Tuple[int, int, int, int, int]:
        return (self.n, self.m, self.p, self.q, self.s)

    @property
    def is_linear(self) -> bool:
        return self.phi.is_zero or not np.any(self.E)

    def nonlinear_term(self, x: np.ndarray) -> np.ndarray:
        """E phi(F x), batched over leading axes of x."""
        return self.phi(x @ self.F.T) @ self.E.T

    def output(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.C.T


def _check_vector(value, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape[-1] != dim:
        raise DimensionError(name, dim, arr.shape[-1])
    return arr


def shift_slope_to_zero(sys: NonlinearSystemTuple) -> NonlinearSystemTuple:
    """Rewrite the system so that the nonlinearity's lower slope bound is zero.

    phi~(s) = phi(s) - a s and A~ = A + a E F, slope bounds become (0, b - a).
    """
    a = sys.phi.slope_lo
    if not math.isfinite(a):
        raise ValueError("unbounded lower slope")
    if a == 0.0:
        return sys
    phi = replace(sys.phi, linear=sys.phi.linear + a, slope_lo=0.0, slope_hi=sys.phi.slope_hi - a)
    return NonlinearSystemTuple(sys.A + a * (sys.E @ sys.F), sys.B, sys.C, sys.D, sys.E, sys.F, sys.R, phi)


def step_dynamics(sys: NonlinearSystemTuple, x, w, nu, zeta) -> np.ndarray:
    """One transition A x + E phi(F x) + D w + B nu + R zeta.

    Every argument may carry leading batch axes; the last axis is the vector axis.
    """
    x = _check_vector(x, sys.n, "x")
    w = _check_vector(w, sys.p, "w")
    nu = _check_vector(nu, sys.m, "nu")
    zeta = _check_vector(zeta, sys.s, "zeta")
    return x @ sys.A.T + sys.nonlinear_term(x) + w @ sys.D.T + nu @ sys.B.T + zeta @ sys.R.T


@dataclass(frozen=True)
class NoiseSource:
    """Seeded stream of standard normal vectors of dimension ``dim``.

    Draws come from a counter-based Philox generator keyed by (seed, stream_id),
    so identical keys give identical draws.
    """

    seed: int
    dim: int
    stream_id: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"noise dimension must be positive, got {self.dim}")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(seq))

    def sample(self, count: int, batch: Optional[int] = None) -> np.ndarray:
        """First ``count`` draws, shaped (count, dim) or (count, batch, dim)."""
        shape = (count, self.dim) if batch is None else (count, batch, self.dim)
        return self.generator().standard_normal(shape)

    def spawn(self, stream_id: int) -> "NoiseSource":
        return NoiseSource(self.seed, self.dim, stream_id)


@dataclass
class TrajectorySample:
    """States, outputs, inputs and noise draws of one simulated run."""

    states: np.ndarray
    outputs: np.ndarray
    nu: np.ndarray
    w: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        if not (len(self.states) == len(self.outputs) == len(self.nu) + 1 == len(self.w) + 1 == len(self.noise) + 1):
            raise ValueError("trajectory arrays have inconsistent lengths")

    @property
    def horizon(self) -> int:
        return len(self.nu)


def _provide(provider: InputProvider, k: int, x: np.ndarray, dim: int, name: str) -> np.ndarray:
    if provider is None:
        return np.zeros(dim)
    try:
        if callable(provider):
            value = provider(k, x)
        else:
            value = np.asarray(provider, dtype=float)[k]
    except Exception as e:
        raise ProviderError(k, e) from e
    return _check_vector(value, dim, name)


def simulate_trajectory(sys: NonlinearSystemTuple, x0, policy: InputProvider = None,
                        wseq: InputProvider = None, noise: Union[NoiseSource, np.ndarray, None] = None,
                        T: int = 0) -> TrajectorySample:
    """Iterate step_dynamics for T steps from x0.

    ``policy`` and ``wseq`` are either arrays indexed by step or callables
    (k, x) -> vector; ``noise`` is a NoiseSource or a recorded (T, s) array
    to replay. Missing providers mean zero inputs or zero noise.
    """
    if T < 0:
        raise ValueError(f"horizon must be nonnegative, got {T}")
    x = _check_vector(x0, sys.n, "x0").copy()
    if noise is None:
        draws = np.zeros((T, sys.s))
    elif isinstance(noise, NoiseSource):
        if noise.dim != sys.s:
            raise DimensionError("noise", sys.s, noise.dim)
        draws = noise.sample(T)
    else:
        draws = np.asarray(noise, dtype=float).reshape(-1, sys.s)[:T]
        if len(draws) < T:
            raise ValueError(f"recorded noise has {len(draws)} draws, horizon needs {T}")

    states = [x]
    nus, ws = [], []
    for k in range(T):
        nu = _provide(policy, k, x, sys.m, "nu")
        w = _provide(wseq, k, x, sys.p, "w")
        x = step_dynamics(sys, x, w, nu, draws[k])
        states.append(x)
        nus.append(nu)
        ws.append(w)

    states = np.array(states)
    return TrajectorySample(
        states=states,
        outputs=states @ sys.C.T,
        nu=np.array(nus).reshape(T, sys.m),
        w=np.array(ws).reshape(T, sys.p),
        noise=np.array(draws).reshape(T, sys.s),
    )
