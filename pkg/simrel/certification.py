"""Certification of (eps, delta) simulation relations between a concrete system and its reduced model.

A candidate (relation, interface) pair is certified by three groups of checks:

- output dominance M >= C^T C,
- five structural equalities tying the concrete and reduced matrices together,
- a chance constraint on the one-step state deviation, discharged by bounding
  the noise in a chi-square ball and an S-procedure eigenvalue test.

The S-procedure is first tried with a single multiplier. If that fails, one
multiplier per quadratic constraint is chosen in closed form and the
aggregated problem is checked with the same bordered eigenvalue test.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg, stats

from .config import LAMBDA_ITERATIONS, LAMBDA_MAX, LAMBDA_PROFILE_POINTS, TOL_EQ, TOL_PSD_REL, TOL_SYM
from .errors import CertificationError, DimensionError
from .models import NonlinearSystemTuple
from .relations import (
    SHARED_NOISE,
    InterfaceParams,
    LiftedCoupling,
    QuadraticInputRelation,
    QuadraticStateRelation,
)

SINGLE_MULTIPLIER = "single_multiplier"
CHANNEL_MULTIPLIERS = "channel_multipliers"

# Order of the blocks of the S-procedure variable vector
CHANNELS = ("state", "slope", "internal_input", "abstract_input", "quantization", "noise")

STRUCTURAL_EQUALITIES = ("output_map", "nonlinearity_argument", "nonlinearity_gain", "drift", "internal_input")


@dataclass
class ConditionCheck:
    """Outcome of one certification condition."""

    name: str
    passed: bool
    residual: float
    detail: str = ""

    def to_dict(self) -> Dict:
        return {"name": self.name, "passed": self.passed, "residual": self.residual, "detail": self.detail}


def symmetric_min_eigenvalue(matrix: np.ndarray) -> Tuple[float, float]:
    """Smallest eigenvalue and largest absolute eigenvalue of a symmetric matrix."""
    scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
    if np.max(np.abs(matrix - matrix.T), initial=0.0) > TOL_SYM * scale:
        raise ValueError("matrix is not symmetric")
    eigs = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
    return float(eigs[0]), float(np.max(np.abs(eigs)))


def psd_tolerance(max_abs_eig: float, tol_psd: Optional[float] = None) -> float:
    rel = TOL_PSD_REL if tol_psd is None else tol_psd
    return rel * max(1.0, max_abs_eig)


def check_output_dominance(M, C, tol_psd: Optional[float] = None) -> ConditionCheck:
    """Check M - C^T C is positive semidefinite.

    Returns:
        ConditionCheck whose residual is the smallest eigenvalue of M - C^T C.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != M.shape[0]:
        raise DimensionError("C", M.shape[0], C.shape[1])
    min_eig, max_abs = symmetric_min_eigenvalue(M - C.T @ C)
    tol = psd_tolerance(max_abs, tol_psd)
    return ConditionCheck("output_dominance", min_eig >= -tol, min_eig, f"tolerance {tol:.3g}")


def _relative_residual(lhs: np.ndarray, rhs: np.ndarray) -> float:
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if lhs.shape != rhs.shape:
        raise DimensionError("structural equality", lhs.shape, rhs.shape)
    if lhs.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return float(np.max(np.abs(lhs - rhs) / denom))


def check_structural_equalities(conc: NonlinearSystemTuple, absr: NonlinearSystemTuple, P, Pw, Q, S, L1, L2,
                                tol_eq: float = TOL_EQ) -> List[ConditionCheck]:
    """Verify the five equalities linking the concrete and reduced tuples.

    Each equality passes when every entry satisfies
    |lhs - rhs| <= tol_eq * max(1, |lhs|, |rhs|).

    Args:
        conc: Concrete system.
        absr: Reduced-order system.
        P, Pw: State and internal-input relation maps.
        Q, S, L1, L2: Interface parameters entering the equalities.
        tol_eq: Relative tolerance.

    Returns:
        One ConditionCheck per equality, in a fixed order.
    """
    supplied = {"P": P, "Pw": Pw, "Q": Q, "S": S, "L1": L1, "L2": L2}
    missing = [name for name, value in supplied.items() if value is None]
    if missing:
        raise ValueError(f"missing matrices: {', '.join(missing)}")
    P, Pw, Q, S, L1, L2 = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (P, Pw, Q, S, L1, L2))

    pairs = {
        "output_map": (absr.C, conc.C @ P),
        "nonlinearity_argument": (absr.F, conc.F @ P),
        "nonlinearity_gain": (conc.E, P @ absr.E - conc.B @ (L1 - L2)),
        "drift": (conc.A @ P, P @ absr.A - conc.B @ Q),
        "internal_input": (conc.D @ Pw, P @ absr.D - conc.B @ S),
    }
    checks = []
    for name in STRUCTURAL_EQUALITIES:
        lhs, rhs = pairs[name]
        residual = _relative_residual(lhs, rhs)
        checks.append(ConditionCheck(name, residual <= tol_eq, residual, f"tolerance {tol_eq:.3g}"))
    return checks


def chi_square_inverse_cdf(dof: int, p: float) -> float:
    """Quantile x with P(chi2_dof <= x) = p."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if dof < 1:
        raise ValueError(f"degrees of freedom must be positive, got {dof}")
    return float(stats.chi2.ppf(p, dof))


@dataclass
class ChanceConstraintParams:
    """Bounds entering the chance constraint."""

    delta: float
    c_zeta: float
    c_nuhat: float
    eps_w: float
    beta: float
    dof: int

    @classmethod
    def derive(cls, delta: float, c_nuhat: float, eps_w: float, beta: float, dof: int) -> "ChanceConstraintParams":
        """Bound the noise by the chi-square quantile at 1 - delta."""
        if not 0.0 < delta < 1.0:
            raise ValueError(f"c_zeta is infinite for delta={delta}; delta must lie in (0, 1)")
        if c_nuhat < 0 or beta < 0:
            raise ValueError("c_nuhat and beta must be nonnegative")
        return cls(delta, chi_square_inverse_cdf(dof, 1.0 - delta), c_nuhat, eps_w, beta, dof)

    def to_dict(self) -> Dict:
        return {"delta": self.delta, "c_zeta": self.c_zeta, "c_nuhat": self.c_nuhat,
                "eps_w": self.eps_w, "beta": self.beta, "dof": self.dof}


@dataclass(eq=False)
class SProcedureProblem:
    """Quadratic implication z^T F1 z + 2 g1^T z + h1 <= 0  =>  z^T F2 z + 2 g2^T z + h2 <= 0."""

    F1: np.ndarray
    g1: np.ndarray
    h1: float
    F2: np.ndarray
    g2: np.ndarray
    h2: float

    def __post_init__(self):
        self.F1 = np.atleast_2d(np.asarray(self.F1, dtype=float))
        self.F2 = np.atleast_2d(np.asarray(self.F2, dtype=float))
        d = self.F1.shape[0]
        self.g1 = np.asarray(self.g1, dtype=float).reshape(d)
        self.g2 = np.asarray(self.g2, dtype=float).reshape(d)
        if self.F1.shape != (d, d) or self.F2.shape != (d, d):
            raise DimensionError("F2", (d, d), self.F2.shape)
        for name in ("F1", "F2"):
            F = getattr(self, name)
            scale = max(1.0, float(np.max(np.abs(F)))) if F.size else 1.0
            if np.max(np.abs(F - F.T), initial=0.0) > TOL_SYM * scale:
                raise ValueError(f"{name} is not symmetric")
        self.h1 = float(self.h1)
        self.h2 = float(self.h2)

    @property
    def d(self) -> int:
        return self.F1.shape[0]

    def premise_matrix(self) -> np.ndarray:
        return np.block([[self.F1, self.g1[:, None]], [self.g1[None, :], np.array([[self.h1]])]])

    def conclusion_matrix(self) -> np.ndarray:
        return np.block([[self.F2, self.g2[:, None]], [self.g2[None, :], np.array([[self.h2]])]])

    def bordered(self, lam: float) -> np.ndarray:
        return lam * self.premise_matrix() - self.conclusion_matrix()


@dataclass
class SProcedureCheck:
    lam: float
    passed: bool
    min_eig: float
    tolerance: float


def check_sprocedure(prob: SProcedureProblem, lam: float, tol_psd: Optional[float] = None) -> SProcedureCheck:
    """Check lam * Q1 - Q2 >= -tol with Q1, Q2 the bordered premise/conclusion matrices."""
    if lam < 0:
        raise ValueError(f"multiplier must be nonnegative, got {lam}")
    min_eig, max_abs = symmetric_min_eigenvalue(prob.bordered(lam))
    tol = psd_tolerance(max_abs, tol_psd)
    return SProcedureCheck(float(lam), min_eig >= -tol, min_eig, tol)


@dataclass
class LambdaSearch:
    lam: float
    min_eig: float
    passed: bool
    tolerance: float
    profile: List[Tuple[float, float]]


def search_lambda(prob: SProcedureProblem, lam_max: float = LAMBDA_MAX, iterations: int = LAMBDA_ITERATIONS,
                  tol_psd: Optional[float] = None) -> LambdaSearch:
    """Maximize the smallest eigenvalue of the bordered matrix over [0, lam_max].

    The objective is concave in the multiplier, so ternary search converges
    to a maximizer.
    """
    def objective(lam: float) -> float:
        return symmetric_min_eigenvalue(prob.bordered(lam))[0]

    lo, hi = 0.0, float(lam_max)
    for _ in range(iterations):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if objective(m1) < objective(m2):
            lo = m1
        else:
            hi = m2
    best = 0.5 * (lo + hi)
    check = check_sprocedure(prob, best, tol_psd)

    grid = [0.0] + list(np.geomspace(1e-4, lam_max, LAMBDA_PROFILE_POINTS - 1))
    profile = [(float(lam), objective(lam)) for lam in grid]
    return LambdaSearch(best, check.min_eig, check.passed, check.tolerance, profile)


def _deviation_blocks(conc: NonlinearSystemTuple, absr: NonlinearSystemTuple, rel: QuadraticStateRelation,
                      ifc: InterfaceParams) -> List[np.ndarray]:
    """Coefficient blocks of the next-step deviation x' - P xhat' in the variable vector."""
    if conc.s != absr.s:
        raise DimensionError("R_hat", conc.s, absr.s)
    ifc.validate_against(conc, absr)
    P = rel.P
    return [
        conc.A + conc.B @ ifc.K,
        (conc.B @ ifc.L1 + conc.E) @ conc.F,
        conc.D,
        conc.B @ ifc.Rtilde - P @ absr.B,
        P,
        conc.R - P @ absr.R,
    ]


def assemble_sproc_matrices(conc: NonlinearSystemTuple, absr: NonlinearSystemTuple, rel: QuadraticStateRelation,
                            input_rel: QuadraticInputRelation, ifc: InterfaceParams,
                            ccp: ChanceConstraintParams) -> SProcedureProblem:
    """Single-multiplier S-procedure problem for the chance constraint.

    The premise weights the blocks by (M, 0, Mw, I, I, I) with
    h1 = -(eps^2 + eps_w^2 + c_nuhat + c_zeta + beta); the conclusion is
    V^T M V with h2 = -eps^2, V the stacked deviation blocks.
    """
    blocks = _deviation_blocks(conc, absr, rel, ifc)
    if input_rel.p != conc.p:
        raise DimensionError("Mw", conc.p, input_rel.p)
    V = np.hstack(blocks)
    d = V.shape[1]
    F1 = linalg.block_diag(rel.M, np.zeros((conc.n, conc.n)), input_rel.Mw,
                           np.eye(absr.m), np.eye(absr.n), np.eye(conc.s))
    F2 = V.T @ rel.M @ V
    h1 = -(rel.eps ** 2 + ccp.eps_w ** 2 + ccp.c_nuhat + ccp.c_zeta + ccp.beta)
    return SProcedureProblem(F1, np.zeros(d), h1, 0.5 * (F2 + F2.T), np.zeros(d), -rel.eps ** 2)


def _sqrt_psd(N: np.ndarray, inverse: bool = False) -> np.ndarray:
    eigs, vecs = np.linalg.eigh(N)
    roots = np.sqrt(eigs)
    if inverse:
        roots = 1.0 / roots
    return (vecs * roots) @ vecs.T


@dataclass
class ChannelWeighting:
    """Per-channel multipliers and gains of the aggregated S-procedure."""

    gains: Dict[str, float]
    bounds: Dict[str, float]
    weights: Dict[str, float]
    total: float
    feasible: bool
    problem: Optional[SProcedureProblem] = None


def channel_weighted_problem(conc: NonlinearSystemTuple, absr: NonlinearSystemTuple, rel: QuadraticStateRelation,
                             input_rel: QuadraticInputRelation, ifc: InterfaceParams,
                             ccp: ChanceConstraintParams) -> ChannelWeighting:
    """Aggregate one multiplier per quadratic constraint into a single S-procedure problem.

    Channel j bounds y_j^T N_j y_j <= c_j and contributes V_j y_j to the
    deviation. With a_j = ||M^(1/2) V_j N_j^(-1/2)|| the chance constraint
    holds when sum_j a_j sqrt(c_j) <= eps, and the weights
    lambda_j = a_j eps / sqrt(c_j) turn it into a problem that passes the
    bordered test with multiplier 1.
    """
    blocks = _deviation_blocks(conc, absr, rel, ifc)
    slope = conc.phi.max_abs_slope()
    eps = rel.eps
    channel_data = [
        (rel.M, eps ** 2),
        (rel.M, slope ** 2 * eps ** 2 if math.isfinite(slope) else math.inf),
        (input_rel.Mw, ccp.eps_w ** 2),
        (np.eye(absr.m), ccp.c_nuhat),
        (np.eye(absr.n), ccp.beta ** 2),
        (np.eye(conc.s), ccp.c_zeta),
    ]
    M_half = _sqrt_psd(rel.M)

    gains, bounds = {}, {}
    for name, V, (N, c) in zip(CHANNELS, blocks, channel_data):
        if V.size == 0:
            gains[name] = 0.0
        else:
            gains[name] = float(np.linalg.norm(M_half @ V @ _sqrt_psd(N, inverse=True), 2))
        bounds[name] = float(c)

    active = {name: a for name, a in gains.items() if a > 0.0}
    if any(math.isinf(bounds[name]) for name in active):
        return ChannelWeighting(gains, bounds, {}, math.inf, False)
    total = sum(a * math.sqrt(bounds[name]) for name, a in active.items())
    pinned = [name for name in active if bounds[name] == 0.0]
    slack = 1.0 - total / eps
    if total > eps or (pinned and slack <= 0.0):
        return ChannelWeighting(gains, bounds, {}, total, False)

    weights = {}
    for name in CHANNELS:
        a = gains[name]
        if a == 0.0:
            weights[name] = 0.0
        elif bounds[name] == 0.0:
            # Channel forced to zero; any weight keeps h1 unchanged
            weights[name] = 2.0 * len(pinned) * a * a / slack
        else:
            weights[name] = a * eps / math.sqrt(bounds[name])

    F1 = linalg.block_diag(*[weights[name] * N for name, (N, _) in zip(CHANNELS, channel_data)])
    V = np.hstack(blocks)
    F2 = V.T @ rel.M @ V
    h1 = -sum(weights[name] * bounds[name] for name in CHANNELS if weights[name] > 0.0)
    d = V.shape[1]
    problem = SProcedureProblem(F1, np.zeros(d), h1, 0.5 * (F2 + F2.T), np.zeros(d), -eps ** 2)
    return ChannelWeighting(gains, bounds, weights, total, True, problem)


@dataclass(eq=False)
class RelationCertificate:
    """Certified (eps, delta) simulation relation with its evidence."""

    state_relation: QuadraticStateRelation
    input_relation: QuadraticInputRelation
    interface: InterfaceParams
    delta: float
    lam: float
    path: str
    chance: ChanceConstraintParams
    evidence: List[ConditionCheck] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    channel_weights: Optional[Dict[str, float]] = None
    tolerances: Dict[str, float] = field(default_factory=dict)
    name: str = ""

    @property
    def eps(self) -> float:
        return self.state_relation.eps


def certify_relation(conc: NonlinearSystemTuple, absr: NonlinearSystemTuple, rel: QuadraticStateRelation,
                     input_rel: QuadraticInputRelation, ifc: InterfaceParams, delta: float, c_nuhat: float,
                     beta: float, dof: Optional[int] = None, lam: Optional[float] = None,
                     tol_psd: Optional[float] = None, tol_eq: float = TOL_EQ,
                     coupling: Optional[LiftedCoupling] = None, name: str = "") -> RelationCertificate:
    """Certify that the reduced model is (eps, delta)-simulated by the concrete system.

    Args:
        conc: Concrete system.
        absr: Reduced-order system.
        rel: Candidate state relation (carries eps).
        input_rel: Candidate internal-input relation (carries eps_w).
        ifc: Candidate interface parameters.
        delta: Target one-step failure probability.
        c_nuhat: Bound on nuhat^T nuhat.
        beta: Discretization parameter of the finite abstraction.
        dof: Chi-square degrees of freedom, defaults to the noise dimension.
        lam: Fixed multiplier; None searches for one.
        tol_psd: Relative eigenvalue tolerance.
        tol_eq: Relative tolerance of the structural equalities.
        coupling: Must be shared-noise when given.
        name: Label stored on the certificate.

    Returns:
        RelationCertificate recording which multiplier path succeeded.

    Raises:
        CertificationError: naming every failed condition with its residual.
    """
    if coupling is not None and coupling.mode != SHARED_NOISE:
        raise ValueError("certification requires shared-noise coupling")
    if not 0.0 < delta < 1.0:
        raise CertificationError({"chance_constraint": math.inf}, f"c_zeta is infinite for delta={delta}")

    evidence = [check_output_dominance(rel.M, conc.C, tol_psd)]
    evidence += check_structural_equalities(conc, absr, rel.P, input_rel.Pw, ifc.Q, ifc.S, ifc.L1, ifc.L2, tol_eq)

    dof = conc.s if dof is None else dof
    ccp = ChanceConstraintParams.derive(delta, c_nuhat, input_rel.eps_w, beta, dof)
    flags = []
    if conc.phi.slope_hi > 1.0 and not conc.phi.is_zero:
        flags.append("slope_bound_above_one")

    prob = assemble_sproc_matrices(conc, absr, rel, input_rel, ifc, ccp)
    if lam is None:
        search = search_lambda(prob, tol_psd=tol_psd)
        single = SProcedureCheck(search.lam, search.passed, search.min_eig, search.tolerance)
    else:
        single = check_sprocedure(prob, lam, tol_psd)

    path, weights, used_lam = SINGLE_MULTIPLIER, None, single.lam
    if single.passed:
        evidence.append(ConditionCheck("chance_constraint", True, single.min_eig,
                                       f"single multiplier {single.lam:.6g} tolerance {single.tolerance:.3g}"))
    else:
        weighting = channel_weighted_problem(conc, absr, rel, input_rel, ifc, ccp)
        if weighting.feasible:
            check = check_sprocedure(weighting.problem, 1.0, tol_psd)
            passed, residual, tol = check.passed, check.min_eig, check.tolerance
        else:
            passed, residual, tol = False, weighting.total - rel.eps, single.tolerance
        detail = (f"single multiplier {single.lam:.6g} min eigenvalue {single.min_eig:.6g}; "
                  f"channel gain sum {weighting.total:.6g} vs eps {rel.eps:.6g} tolerance {tol:.3g}")
        evidence.append(ConditionCheck("chance_constraint", passed, residual, detail))
        path, weights, used_lam = CHANNEL_MULTIPLIERS, weighting.weights, 1.0

    failures = {check.name: check.residual for check in evidence if not check.passed}
    if failures:
        raise CertificationError(failures)

    return RelationCertificate(
        state_relation=rel,
        input_relation=input_rel,
        interface=ifc,
        delta=delta,
        lam=used_lam,
        path=path,
        chance=ccp,
        evidence=evidence,
        flags=flags,
        channel_weights=weights,
        tolerances={"tol_psd": TOL_PSD_REL if tol_psd is None else tol_psd, "tol_eq": tol_eq},
        name=name,
    )


def derive_reduced_model(conc: NonlinearSystemTuple, P, Pw, Q, S, L1, L2, Bhat,
                         Rhat=None) -> NonlinearSystemTuple:
    """Reduced-order tuple satisfying the structural equalities in the least-squares sense."""
    P, Pw, Q, S, L1, L2, Bhat = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (P, Pw, Q, S, L1, L2, Bhat))
    P_pinv = np.linalg.pinv(P)
    A_hat = P_pinv @ (conc.A @ P + conc.B @ Q)
    E_hat = P_pinv @ (conc.E + conc.B @ (L1 - L2))
    D_hat = P_pinv @ (conc.D @ Pw + conc.B @ S)
    R_hat = P_pinv @ conc.R if Rhat is None else Rhat
    return NonlinearSystemTuple(A_hat, Bhat, conc.C @ P, D_hat, E_hat, conc.F @ P, R_hat, conc.phi)


def least_squares_rtilde(B, M, P, Bhat) -> np.ndarray:
    """Rtilde = (B^T M B)^-1 B^T M P Bhat, minimizing the M-weighted input mismatch."""
    B, M, P, Bhat = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (B, M, P, Bhat))
    return np.linalg.solve(B.T @ M @ B, B.T @ M @ P @ Bhat)
