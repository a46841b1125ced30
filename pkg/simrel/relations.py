"""Quadratic state/input relations, the interface function and coupled steps."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import TOL_SYM
from .errors import DimensionError
from .models import NoiseSource, NonlinearSystemTuple, _as_matrix, _check_vector, step_dynamics

SHARED_NOISE = "shared_noise"
INDEPENDENT = "independent"


def _check_spd(M: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if M.shape[0] != M.shape[1]:
        raise DimensionError(name, "square", M.shape)
    if np.max(np.abs(M - M.T), initial=0.0) > TOL_SYM * scale:
        raise ValueError(f"{name} is not symmetric")
    if M.size and np.linalg.eigvalsh(M).min() <= 0.0:
        raise ValueError(f"{name} is not positive definite")


def quadratic_deviation(P: np.ndarray, M: np.ndarray, a, b) -> np.ndarray:
    """(a - P b)^T M (a - P b), batched over leading axes."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float) @ P.T
    return np.einsum("...i,ij,...j->...", d, M, d)


@dataclass(frozen=True, eq=False)
class QuadraticStateRelation:
    """Relation (x - P xhat)^T M (x - P xhat) <= eps^2."""

    P: np.ndarray
    M: np.ndarray
    eps: float

    def __post_init__(self):
        P = _as_matrix(self.P, "P")
        M = _as_matrix(self.M, "M", rows=P.shape[0], cols=P.shape[0])
        _check_spd(M, "M")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def n_hat(self) -> int:
        return self.P.shape[1]

    def deviation(self, x, xhat) -> np.ndarray:
        return quadratic_deviation(self.P, self.M, _check_vector(x, self.n, "x"),
                                   _check_vector(xhat, self.n_hat, "xhat"))


@dataclass(frozen=True, eq=False)
class QuadraticInputRelation:
    """Relation (w - Pw what)^T Mw (w - Pw what) <= eps_w^2 with eps_w > 0.

    ``matching`` builds the exact case eps_w = 0, where the internal inputs
    must agree exactly.
    """

    Pw: np.ndarray
    Mw: np.ndarray
    eps_w: float
    exact: bool = False

    def __post_init__(self):
        Pw = _as_matrix(self.Pw, "Pw")
        Mw = _as_matrix(self.Mw, "Mw", rows=Pw.shape[0], cols=Pw.shape[0])
        _check_spd(Mw, "Mw")
        if self.exact and self.eps_w != 0:
            raise ValueError(f"an exact input relation has eps_w = 0, got {self.eps_w}")
        if not self.exact and not self.eps_w > 0:
            raise ValueError(f"eps_w must be positive, got {self.eps_w}; use matching() for exact inputs")
        object.__setattr__(self, "Pw", Pw)
        object.__setattr__(self, "Mw", Mw)
        object.__setattr__(self, "eps_w", float(self.eps_w))

    @classmethod
    def matching(cls, Pw, Mw=None) -> "QuadraticInputRelation":
        """Internal inputs must equal Pw what exactly."""
        Pw = _as_matrix(Pw, "Pw")
        Mw = np.eye(Pw.shape[0]) if Mw is None else Mw
        return cls(Pw, Mw, 0.0, exact=True)

    @classmethod
    def from_eps(cls, Pw, Mw, eps_w: float) -> "QuadraticInputRelation":
        """Stored relations: eps_w = 0 reads back as the exact case."""
        if eps_w == 0:
            return cls.matching(Pw, Mw)
        return cls(Pw, Mw, eps_w)

    @property
    def p(self) -> int:
        return self.Pw.shape[0]

    @property
    def p_hat(self) -> int:
        return self.Pw.shape[1]

    def deviation(self, w, what) -> np.ndarray:
        return quadratic_deviation(self.Pw, self.Mw, _check_vector(w, self.p, "w"),
                                   _check_vector(what, self.p_hat, "what"))


def state_in_relation(rel: QuadraticStateRelation, x, xhat):
    """True where the state pair lies in the relation (no tolerance).

    NaN abstract states (the sink) are never related.
    """
    result = rel.deviation(x, xhat) <= rel.eps ** 2
    return bool(result) if np.ndim(result) == 0 else result


def input_in_relation(rel: QuadraticInputRelation, w, what):
    """True where the internal-input pair lies in the relation."""
    result = rel.deviation(w, what) <= rel.eps_w ** 2
    return bool(result) if np.ndim(result) == 0 else result


@dataclass(frozen=True, eq=False)
class InterfaceParams:
    """Parameters (K, Q, S, L1, L2, Rtilde) of the interface function."""

    K: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    Rtilde: np.ndarray

    def __post_init__(self):
        K = _as_matrix(self.K, "K")
        m = K.shape[0]
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "Q", _as_matrix(self.Q, "Q", rows=m))
        object.__setattr__(self, "S", _as_matrix(self.S, "S", rows=m))
        object.__setattr__(self, "L1", _as_matrix(self.L1, "L1", rows=m, cols=1))
        object.__setattr__(self, "L2", _as_matrix(self.L2, "L2", rows=m, cols=1))
        object.__setattr__(self, "Rtilde", _as_matrix(self.Rtilde, "Rtilde", rows=m))

    @classmethod
    def passthrough(cls, m: int, n: int, n_hat: int, p_hat: int) -> "InterfaceParams":
        """Interface returning nu = nuhat (K = Q = S = L1 = L2 = 0, Rtilde = I)."""
        return cls(np.zeros((m, n)), np.zeros((m, n_hat)), np.zeros((m, p_hat)),
                   np.zeros((m, 1)), np.zeros((m, 1)), np.eye(m))

    @property
    def m(self) -> int:
        return self.K.shape[0]

    def validate_against(self, conc: NonlinearSystemTuple, absr: NonlinearSystemTuple) -> None:
        """Raise DimensionError unless the parameters fit the concrete/abstract pair."""
        expected = {
            "K": (conc.m, conc.n),
            "Q": (conc.m, absr.n),
            "S": (conc.m, absr.p),
            "L1": (conc.m, 1),
            "L2": (conc.m, 1),
            "Rtilde": (conc.m, absr.m),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(name, shape, actual)


def refine_input(ifc: InterfaceParams, sys: NonlinearSystemTuple, rel: QuadraticStateRelation,
                 x, xhat, what, nuhat) -> np.ndarray:
    """Concrete input K(x - P xhat) + Q xhat + Rtilde nuhat + S what + L1 phi(F x) - L2 phi(F P xhat).

    Batched over leading axes of the arguments.
    """
    x = _check_vector(x, sys.n, "x")
    xhat = _check_vector(xhat, rel.n_hat, "xhat")
    what = _check_vector(what, ifc.S.shape[1], "what")
    nuhat = _check_vector(nuhat, ifc.Rtilde.shape[1], "nuhat")
    px = xhat @ rel.P.T
    nu = (x - px) @ ifc.K.T + xhat @ ifc.Q.T + nuhat @ ifc.Rtilde.T + what @ ifc.S.T
    if not sys.phi.is_zero:
        nu = nu + sys.phi(x @ sys.F.T) @ ifc.L1.T - sys.phi(px @ sys.F.T) @ ifc.L2.T
    return nu


@dataclass
class LiftedCoupling:
    """Coupling of concrete and abstract noise.

    shared_noise feeds the identical draw to both systems; independent draws
    the abstract noise from its own stream and is only meant for simulation.
    """

    mode: str = SHARED_NOISE
    abstract_noise: Optional[NoiseSource] = None
    _rng: Optional[np.random.Generator] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.mode not in (SHARED_NOISE, INDEPENDENT):
            raise ValueError(f"unknown coupling mode '{self.mode}'")
        if self.mode == INDEPENDENT:
            if self.abstract_noise is None:
                raise ValueError("independent coupling needs its own noise source")
            self._rng = self.abstract_noise.generator()

    @classmethod
    def shared(cls) -> "LiftedCoupling":
        return cls(SHARED_NOISE)

    @classmethod
    def independent(cls, noise: NoiseSource) -> "LiftedCoupling":
        return cls(INDEPENDENT, noise)

    def abstract_draw(self, shape) -> np.ndarray:
        return self._rng.standard_normal(shape)


@dataclass
class CoupledStep:
    """Result of one coupled transition."""

    x: np.ndarray
    xhat: np.ndarray
    nu: np.ndarray
    zeta: np.ndarray
    zeta_hat: np.ndarray


def coupled_step(conc: NonlinearSystemTuple, absr: NonlinearSystemTuple, ifc: InterfaceParams,
                 rel: QuadraticStateRelation, coupling: LiftedCoupling, x, xhat, w, what, nuhat,
                 noise: np.random.Generator, partition=None) -> CoupledStep:
    """Advance a concrete/abstract pair by one step.

    Args:
        conc: Concrete system.
        absr: Reduced-order (abstract) system.
        ifc: Interface parameters refining nuhat into the concrete input.
        rel: State relation whose P enters the interface function.
        coupling: Noise coupling between the two systems.
        x, xhat: Current concrete and abstract states (batched or single).
        w, what: Concrete and abstract internal inputs.
        nuhat: Abstract external input.
        noise: Generator for the concrete noise draw.
        partition: Optional GridPartition; when given the abstract successor is
            quantized to its representative (NaN in the sink).

    Returns:
        CoupledStep with next states, the realized concrete input and the draws.
    """
    if coupling.mode == SHARED_NOISE and conc.s != absr.s:
        raise DimensionError("noise", conc.s, absr.s)
    x = _check_vector(x, conc.n, "x")
    xhat = _check_vector(xhat, absr.n, "xhat")
    batch = x.shape[:-1]

    zeta = noise.standard_normal(batch + (conc.s,))
    if coupling.mode == SHARED_NOISE:
        zeta_hat = zeta
    else:
        zeta_hat = coupling.abstract_draw(batch + (absr.s,))

    nu = refine_input(ifc, conc, rel, x, xhat, what, nuhat)
    x_next = step_dynamics(conc, x, w, nu, zeta)
    xhat_next = step_dynamics(absr, xhat, what, nuhat, zeta_hat)
    if partition is not None:
        xhat_next = partition.quantize(xhat_next)
    return CoupledStep(x_next, xhat_next, nu, zeta, zeta_hat)
