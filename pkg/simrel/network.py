"""Interconnection of subsystems and composition of their simulation relations.

Subsystem j receives internal input w_j assembled from the internal outputs
C x_i of its neighbours: every edge i -> j fills a contiguous slot of w_j.
Unless a slot is given explicitly, incoming edges are stacked in increasing
source order.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .certification import RelationCertificate, check_sprocedure, search_lambda, SProcedureProblem
from .config import TRIAL_CHUNK
from .errors import CertificationError, DimensionError
from .models import NoiseSource, NonlinearSystemTuple, NonlinearityDescriptor, _check_vector
from .relations import QuadraticInputRelation, QuadraticStateRelation, refine_input, state_in_relation
from .workers import run_parallel


@dataclass(frozen=True, eq=False)
class Edge:
    """Internal output of ``source`` feeding a slot of ``target``'s internal input."""

    source: int
    target: int
    C: np.ndarray
    C_hat: Optional[np.ndarray] = None
    slot: Optional[int] = None
    slot_hat: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        if self.C_hat is not None:
            object.__setattr__(self, "C_hat", np.atleast_2d(np.asarray(self.C_hat, dtype=float)))

    @property
    def id(self) -> str:
        return f"{self.source}->{self.target}"

    def matrix(self, abstract: bool = False) -> np.ndarray:
        if abstract:
            if self.C_hat is None:
                raise ValueError(f"edge {self.id} has no abstract internal output")
            return self.C_hat
        return self.C


@dataclass(frozen=True)
class NetworkTopology:
    """Edges between N subsystems with the internal-input dimension of each.

    ``abstract_internal_dims`` is needed only for abstract (reduced) networks.
    """

    n_subsystems: int
    edges: Tuple[Edge, ...] = ()
    internal_dims: Tuple[int, ...] = ()
    abstract_internal_dims: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        dims = tuple(self.internal_dims) or (0,) * self.n_subsystems
        object.__setattr__(self, "internal_dims", dims)
        object.__setattr__(self, "abstract_internal_dims", tuple(self.abstract_internal_dims))

    def incoming(self, j: int) -> List[Edge]:
        return sorted((e for e in self.edges if e.target == j), key=lambda e: e.source)

    def slot_layout(self, j: int, abstract: bool = False) -> List[Tuple[Edge, int, int]]:
        """(edge, start, width) for every edge into j."""
        layout = []
        cursor = 0
        for edge in self.incoming(j):
            width = edge.matrix(abstract).shape[0]
            explicit = edge.slot_hat if abstract else edge.slot
            start = cursor if explicit is None else explicit
            layout.append((edge, start, width))
            cursor = start + width
        return layout


@dataclass
class InterconnectionReport:
    passed: bool
    problems: List[Tuple[str, str]] = field(default_factory=list)


def check_interconnection_constraint(topology: NetworkTopology, state_dims: Optional[Sequence[int]] = None,
                                     abstract: bool = False) -> InterconnectionReport:
    """Check every edge's output fits its slot of the target's internal input.

    Args:
        topology: Network topology.
        state_dims: Optional state dimension per subsystem, to check edge matrix columns.
        abstract: Check the abstract internal outputs against ``abstract_internal_dims``.

    Returns:
        InterconnectionReport listing (edge id, problem) pairs.
    """
    problems = []
    dims = topology.abstract_internal_dims if abstract else topology.internal_dims
    if len(dims) != topology.n_subsystems:
        problems.append(("topology", f"internal dimensions given for {len(dims)} of {topology.n_subsystems} subsystems"))
        return InterconnectionReport(False, problems)

    for edge in topology.edges:
        if not (0 <= edge.source < topology.n_subsystems and 0 <= edge.target < topology.n_subsystems):
            problems.append((edge.id, "subsystem index out of range"))
        elif edge.source == edge.target:
            problems.append((edge.id, "self-loop"))
        elif abstract and edge.C_hat is None:
            problems.append((edge.id, "missing abstract internal output"))
        elif state_dims is not None and edge.matrix(abstract).shape[1] != state_dims[edge.source]:
            problems.append((edge.id, f"output matrix has {edge.matrix(abstract).shape[1]} columns, "
                                      f"source state has {state_dims[edge.source]}"))
    if problems:
        return InterconnectionReport(False, problems)

    for j in range(topology.n_subsystems):
        used = np.zeros(dims[j], dtype=int)
        for edge, start, width in topology.slot_layout(j, abstract):
            if start < 0 or start + width > dims[j]:
                problems.append((edge.id, f"{width}-d output does not fit slot at {start} of {dims[j]}-d internal input"))
                continue
            used[start:start + width] += 1
        if np.any(used > 1):
            problems.append((f"->{j}", "overlapping internal-input slots"))
    return InterconnectionReport(not problems, problems)


def internal_inputs(topology: NetworkTopology, states: Sequence[np.ndarray], abstract: bool = False) -> List[np.ndarray]:
    """w_j = g_j(x_1, ..., x_N) for every subsystem, batched over leading axes."""
    dims = topology.abstract_internal_dims if abstract else topology.internal_dims
    batch = np.asarray(states[0]).shape[:-1]
    ws = [np.zeros(batch + (dims[j],)) for j in range(topology.n_subsystems)]
    for j in range(topology.n_subsystems):
        for edge, start, width in topology.slot_layout(j, abstract):
            ws[j][..., start:start + width] += np.asarray(states[edge.source]) @ edge.matrix(abstract).T
    return ws


@dataclass(eq=False)
class InterconnectedSystem:
    """Closed network without internal inputs; one nonlinear term per subsystem."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    R: np.ndarray
    nonlinear_terms: List[Tuple[np.ndarray, np.ndarray, NonlinearityDescriptor]]
    state_offsets: List[int]

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def step(self, x, nu, zeta) -> np.ndarray:
        x = _check_vector(x, self.n, "x")
        nxt = x @ self.A.T + _check_vector(nu, self.B.shape[1], "nu") @ self.B.T \
            + _check_vector(zeta, self.R.shape[1], "zeta") @ self.R.T
        for E, F, phi in self.nonlinear_terms:
            nxt = nxt + phi(x @ F.T) @ E.T
        return nxt

    def simulate(self, x0, nu_seq: np.ndarray, zeta_seq: np.ndarray) -> np.ndarray:
        """States x(0..T) under recorded inputs and noise."""
        states = [_check_vector(x0, self.n, "x0")]
        for nu, zeta in zip(nu_seq, zeta_seq):
            states.append(self.step(states[-1], nu, zeta))
        return np.array(states)


def interconnect(topology: NetworkTopology, systems: Sequence[NonlinearSystemTuple],
                 abstract: bool = False) -> InterconnectedSystem:
    """Wire the internal inputs through the edges into one block system.

    Block (j, i) of the composed drift is A_j on the diagonal and
    D_j[:, slot] C_edge for an edge i -> j.
    """
    if len(systems) != topology.n_subsystems:
        raise DimensionError("systems", topology.n_subsystems, len(systems))
    dims_attr = "abstract_internal_dims" if abstract else "internal_dims"
    dims = tuple(sys.p for sys in systems)
    if getattr(topology, dims_attr) != dims:
        raise DimensionError(dims_attr, dims, getattr(topology, dims_attr))
    report = check_interconnection_constraint(topology, [sys.n for sys in systems], abstract)
    if not report.passed:
        edge_id, problem = report.problems[0]
        raise DimensionError(f"edge {edge_id}", "compatible slot", problem)

    offsets = list(np.cumsum([0] + [sys.n for sys in systems]))
    A = linalg.block_diag(*[sys.A for sys in systems])
    for j, sys in enumerate(systems):
        for edge, start, width in topology.slot_layout(j, abstract):
            i = edge.source
            A[offsets[j]:offsets[j + 1], offsets[i]:offsets[i + 1]] += sys.D[:, start:start + width] @ edge.matrix(abstract)

    terms = []
    for j, sys in enumerate(systems):
        if sys.is_linear:
            continue
        E = np.zeros((offsets[-1], 1))
        F = np.zeros((1, offsets[-1]))
        E[offsets[j]:offsets[j + 1]] = sys.E
        F[:, offsets[j]:offsets[j + 1]] = sys.F
        terms.append((E, F, sys.phi))

    return InterconnectedSystem(
        A=A,
        B=linalg.block_diag(*[sys.B for sys in systems]),
        C=linalg.block_diag(*[sys.C for sys in systems]),
        R=linalg.block_diag(*[sys.R for sys in systems]),
        nonlinear_terms=terms,
        state_offsets=offsets,
    )


def simulate_network(topology: NetworkTopology, systems: Sequence[NonlinearSystemTuple], x0s: Sequence,
                     nu_seqs: Sequence[np.ndarray], noises: Sequence[NoiseSource], T: int) -> List[np.ndarray]:
    """Simulate subsystems side by side, substituting w_j = g_j(x) at every step.

    Noise sources must use distinct streams (subsystem noises are independent).
    """
    streams = [(src.seed, src.stream_id) for src in noises]
    if len(set(streams)) != len(streams):
        raise ValueError("dependent network noise: subsystem noise sources share a stream")
    draws = [src.sample(T) for src in noises]
    xs = [np.asarray(x, dtype=float) for x in x0s]
    history = [[x] for x in xs]
    for k in range(T):
        ws = internal_inputs(topology, xs)
        xs = [sys.A @ x + sys.nonlinear_term(x) + sys.D @ w + sys.B @ nu_seq[k] + sys.R @ draw[k]
              for sys, x, w, nu_seq, draw in zip(systems, xs, ws, nu_seqs, draws)]
        for hist, x in zip(history, xs):
            hist.append(x)
    return [np.array(h) for h in history]


@dataclass(frozen=True, eq=False)
class CompositionSource:
    """Source subsystem feeding a receiver: its relation and internal output maps."""

    relation: QuadraticStateRelation
    C: np.ndarray
    C_hat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        object.__setattr__(self, "C_hat", np.atleast_2d(np.asarray(self.C_hat, dtype=float)))


@dataclass
class CompositionalityCheck:
    passed: bool
    lam: float
    min_eig: float
    searched: bool = False

    def to_dict(self) -> Dict:
        return {"passed": self.passed, "lambda": self.lam, "min_eig": self.min_eig, "searched": self.searched}


def compositionality_problem(sources: Sequence[CompositionSource], input_rel: QuadraticInputRelation) -> SProcedureProblem:
    """S-procedure problem: related source states imply related internal inputs.

    Premise: sum_i (x_i - P_i xhat_i)^T M_i (x_i - P_i xhat_i) <= sum_i eps_i^2.
    Conclusion: (w - Pw what)^T Mw (w - Pw what) <= eps_w^2 with w, what
    stacked from the source outputs in order.
    """
    premise_blocks = []
    L_blocks = []
    row, row_hat = 0, 0
    p, p_hat = input_rel.p, input_rel.p_hat
    for src in sources:
        rel = src.relation
        W = np.hstack([np.eye(rel.n), -rel.P])
        premise_blocks.append(W.T @ rel.M @ W)
        width, width_hat = src.C.shape[0], src.C_hat.shape[0]
        if row + width > p or row_hat + width_hat > p_hat:
            raise DimensionError("internal input", (p, p_hat), (row + width, row_hat + width_hat))
        if src.C.shape[1] != rel.n or src.C_hat.shape[1] != rel.n_hat:
            raise DimensionError("C_hat", (rel.n, rel.n_hat), (src.C.shape[1], src.C_hat.shape[1]))
        L = np.zeros((p, rel.n + rel.n_hat))
        L[row:row + width, :rel.n] = src.C
        L[:, rel.n:] = -input_rel.Pw[:, row_hat:row_hat + width_hat] @ src.C_hat
        L_blocks.append(L)
        row += width
        row_hat += width_hat
    if row != p or row_hat != p_hat:
        raise DimensionError("internal input", (p, p_hat), (row, row_hat))

    F1 = linalg.block_diag(*premise_blocks)
    L = np.hstack(L_blocks)
    F2 = L.T @ input_rel.Mw @ L
    d = F1.shape[0]
    h1 = -sum(src.relation.eps ** 2 for src in sources)
    return SProcedureProblem(0.5 * (F1 + F1.T), np.zeros(d), h1, 0.5 * (F2 + F2.T), np.zeros(d), -input_rel.eps_w ** 2)


def check_compositionality_condition(sources: Sequence[CompositionSource], input_rel: QuadraticInputRelation,
                                     lam: Optional[float] = None, tol_psd: Optional[float] = None) -> CompositionalityCheck:
    """Bordered eigenvalue test of the compositionality condition; None searches the multiplier."""
    prob = compositionality_problem(sources, input_rel)
    if lam is None:
        search = search_lambda(prob, tol_psd=tol_psd)
        return CompositionalityCheck(search.passed, search.lam, search.min_eig, searched=True)
    check = check_sprocedure(prob, lam, tol_psd)
    return CompositionalityCheck(check.passed, lam, check.min_eig)


def composition_sources(topology: NetworkTopology, j: int,
                        certificates: Sequence[RelationCertificate]) -> List[CompositionSource]:
    """Sources of subsystem j in slot order."""
    return [CompositionSource(certificates[edge.source].state_relation, edge.C, edge.matrix(abstract=True))
            for edge, _, _ in topology.slot_layout(j)]


@dataclass(eq=False)
class ComposedRelation:
    """Conjunction of per-subsystem relations with composed (eps, delta)."""

    certificates: List[RelationCertificate]
    eps: float
    delta: float
    evidence: Dict[int, CompositionalityCheck]

    def contains(self, xs: Sequence, xhats: Sequence):
        result = True
        for cert, x, xhat in zip(self.certificates, xs, xhats):
            result = np.logical_and(result, state_in_relation(cert.state_relation, x, xhat))
        return bool(result) if np.ndim(result) == 0 else result


def compose_delta(deltas: Sequence[float]) -> float:
    """1 - prod(1 - delta_i)."""
    return float(-math.expm1(math.fsum(math.log1p(-d) for d in deltas)))


def compose_relations(certs: Sequence[RelationCertificate], topology: NetworkTopology,
                      evidence: Dict[int, CompositionalityCheck]) -> ComposedRelation:
    """Compose certified subsystem relations into a network relation.

    Raises:
        ValueError: when a subsystem with incoming edges has no compositionality evidence.
        CertificationError: when some evidence failed.
    """
    if len(certs) != topology.n_subsystems:
        raise DimensionError("certificates", topology.n_subsystems, len(certs))
    receivers = sorted({edge.target for edge in topology.edges})
    missing = [j for j in receivers if j not in evidence]
    if missing:
        raise ValueError(f"missing compositionality evidence for subsystems {missing}")
    failed = {f"compositionality_{j}": check.min_eig for j, check in evidence.items() if not check.passed}
    if failed:
        raise CertificationError(failed)
    return ComposedRelation(
        certificates=list(certs),
        eps=math.fsum(c.eps for c in certs),
        delta=compose_delta([c.delta for c in certs]),
        evidence=dict(evidence),
    )


AbstractPolicy = Callable[[int, List[np.ndarray], np.random.Generator], List[np.ndarray]]


@dataclass
class CoupledRuns:
    """Per-trial records of a coupled concrete/abstract network simulation."""

    in_relation: np.ndarray
    outputs: np.ndarray
    abstract_outputs: np.ndarray
    sink_hit: np.ndarray

    @property
    def retained(self) -> np.ndarray:
        return np.all(self.in_relation, axis=1)

    @property
    def max_deviation(self) -> np.ndarray:
        dev = np.linalg.norm(self.outputs - self.abstract_outputs, axis=-1)
        return np.max(np.where(np.isfinite(dev), dev, np.inf), axis=1)


@dataclass(eq=False)
class CoupledNetwork:
    """Concrete network, its abstract network and the certificates linking them.

    Subsystem i is driven through the interface function of certificate i with
    the abstract and concrete subsystem sharing each noise draw. A partition
    quantizes the abstract companion; leaving the box is a relation failure.
    """

    topology: NetworkTopology
    concrete: List[NonlinearSystemTuple]
    abstract: List[NonlinearSystemTuple]
    certificates: List[RelationCertificate]
    xhat0: List[np.ndarray]
    partitions: List = field(default_factory=list)
    x0: Optional[List[np.ndarray]] = None
    policy: Optional[AbstractPolicy] = None

    def __post_init__(self):
        if not self.partitions:
            self.partitions = [None] * len(self.concrete)
        self.xhat0 = [np.asarray(x, dtype=float) for x in self.xhat0]
        if self.x0 is None:
            self.x0 = [c.state_relation.P @ xh for c, xh in zip(self.certificates, self.xhat0)]

    def _run_chunk(self, seed: int, chunk: int, size: int, horizon: int) -> CoupledRuns:
        N = len(self.concrete)
        rngs = [np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk, i))))
                for i in range(N + 1)]
        xs = [np.tile(x, (size, 1)) for x in self.x0]
        xh = []
        for x, part in zip(self.xhat0, self.partitions):
            x = np.tile(x, (size, 1))
            xh.append(part.quantize(x) if part is not None else x)
        sinks = [np.any(np.isnan(x), axis=-1) for x in xh]
        # Sink runs keep the unquantized companion so the concrete run stays meaningful
        xh = [np.where(np.isnan(q), np.tile(x, (size, 1)), q) for q, x in zip(xh, self.xhat0)]

        rels, ys, yhs = [], [], []

        def record():
            related = np.ones(size, dtype=bool)
            for cert, x, q, sink in zip(self.certificates, xs, xh, sinks):
                related &= state_in_relation(cert.state_relation, x, q) & ~sink
            y = np.concatenate([sys.output(x) for sys, x in zip(self.concrete, xs)], axis=-1)
            yh = np.concatenate([sys.output(np.where(sink[:, None], np.nan, q))
                                 for sys, q, sink in zip(self.abstract, xh, sinks)], axis=-1)
            rels.append(related)
            ys.append(y)
            yhs.append(yh)

        record()
        for k in range(horizon):
            ws = internal_inputs(self.topology, xs)
            whs = internal_inputs(self.topology, xh, abstract=True)
            if self.policy is None:
                nuhs = [np.zeros((size, sys.m)) for sys in self.abstract]
            else:
                nuhs = self.policy(k, xh, rngs[N])
            nxt, nxth = [], []
            for i in range(N):
                conc, absr, cert = self.concrete[i], self.abstract[i], self.certificates[i]
                zeta = rngs[i].standard_normal((size, conc.s))
                nu = refine_input(cert.interface, conc, cert.state_relation, xs[i], xh[i], whs[i], nuhs[i])
                nxt.append(xs[i] @ conc.A.T + conc.nonlinear_term(xs[i]) + ws[i] @ conc.D.T
                           + nu @ conc.B.T + zeta @ conc.R.T)
                raw = xh[i] @ absr.A.T + absr.nonlinear_term(xh[i]) + whs[i] @ absr.D.T \
                    + nuhs[i] @ absr.B.T + zeta @ absr.R.T
                part = self.partitions[i]
                if part is not None:
                    q = part.quantize(raw)
                    hit = np.any(np.isnan(q), axis=-1)
                    sinks[i] = sinks[i] | hit
                    raw = np.where(hit[:, None], raw, q)
                nxth.append(raw)
            xs, xh = nxt, nxth
            record()

        return CoupledRuns(np.stack(rels, axis=1), np.stack(ys, axis=1), np.stack(yhs, axis=1),
                           np.any(np.stack(sinks), axis=0))

    def simulate(self, trials: int, horizon: int, seed: int, threads: int = 1,
                 chunk_size: int = TRIAL_CHUNK) -> CoupledRuns:
        """Run coupled trials in fixed-size chunks; results do not depend on ``threads``."""
        sizes = [min(chunk_size, trials - start) for start in range(0, trials, chunk_size)]
        runs = run_parallel(lambda c: self._run_chunk(seed, c, sizes[c], horizon), list(range(len(sizes))), threads)
        return CoupledRuns(
            np.concatenate([r.in_relation for r in runs]),
            np.concatenate([r.outputs for r in runs]),
            np.concatenate([r.abstract_outputs for r in runs]),
            np.concatenate([r.sink_hit for r in runs]),
        )


def level_policy(levels: Sequence[Sequence[float]], systems: Sequence[NonlinearSystemTuple],
                 mode: str = "zero") -> AbstractPolicy:
    """Abstract input policy over a finite list of input levels.

    mode "zero" applies no input, "random" draws levels uniformly and
    "feedback" picks the level minimizing the norm of the noise-free successor.
    """
    levels = np.asarray(levels, dtype=float)
    if levels.ndim == 1:
        levels = levels[:, None]

    def policy(k: int, xhats: List[np.ndarray], rng: np.random.Generator) -> List[np.ndarray]:
        out = []
        for sys, xh in zip(systems, xhats):
            size = xh.shape[0]
            if mode == "zero":
                out.append(np.zeros((size, sys.m)))
            elif mode == "random":
                out.append(levels[rng.integers(0, len(levels), size)])
            elif mode == "feedback":
                drift = xh @ sys.A.T + sys.nonlinear_term(xh)
                cand = drift[:, None, :] + (levels @ sys.B.T)[None, :, :]
                out.append(levels[np.argmin(np.linalg.norm(cand, axis=-1), axis=1)])
            else:
                raise ValueError(f"unknown input policy mode '{mode}'")
        return out

    return policy
