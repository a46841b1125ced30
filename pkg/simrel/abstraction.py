"""Finite MDP abstraction of a reduced-order model by uniform grid partitioning.

States are the centers of the cells of a compact box plus an absorbing sink
collecting the Gaussian mass that leaves the box. Transition probabilities
are exact products of normal CDF differences when the noise covariance is
diagonal in grid coordinates, and seeded Monte Carlo estimates otherwise.
"""

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import special

from .config import DEFAULT_SEED, FORMAT_VERSION, MC_ROW_SAMPLES, MEMORY_CAP_MB, TOL_ROW
from .errors import DimensionError, ResourceCapError
from .models import NonlinearSystemTuple, _check_vector, step_dynamics
from .workers import run_parallel

MDP_COLUMNS = ["from", "w", "u", "to", "prob"]


@dataclass(frozen=True, eq=False)
class GridPartition:
    """Uniform grid over the box [lower, upper] with cell centers as representatives."""

    lower: np.ndarray
    upper: np.ndarray
    widths: np.ndarray
    counts: Tuple[int, ...]
    extended: bool = False

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def sink_index(self) -> int:
        return self.n_cells

    @property
    def beta(self) -> float:
        """Cell diameter."""
        return float(np.linalg.norm(self.widths))

    @cached_property
    def strides(self) -> np.ndarray:
        strides = np.ones(self.dim, dtype=np.int64)
        for d in range(self.dim - 2, -1, -1):
            strides[d] = strides[d + 1] * self.counts[d + 1]
        return strides

    @cached_property
    def centers(self) -> np.ndarray:
        axes = [self.lower[d] + (np.arange(self.counts[d]) + 0.5) * self.widths[d] for d in range(self.dim)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=-1)

    def edges(self, d: int) -> np.ndarray:
        return self.lower[d] + np.arange(self.counts[d] + 1) * self.widths[d]

    def locate(self, points) -> np.ndarray:
        """Cell index of each point; the sink index outside the box.

        Cells are half-open [lo, hi) except along the upper face of the box.
        """
        pts = _check_vector(points, self.dim, "point")
        with np.errstate(invalid="ignore"):
            idx = np.floor((pts - self.lower) / self.widths)
            idx = np.where(np.isfinite(idx), idx, -1).astype(np.int64)
        idx = np.where(pts == self.upper, np.asarray(self.counts) - 1, idx)
        inside = np.asarray(np.all((idx >= 0) & (idx < np.asarray(self.counts)) & np.isfinite(pts), axis=-1))
        flat = np.sum(np.where(inside[..., None], idx, 0) * self.strides, axis=-1)
        return np.where(inside, flat, self.sink_index)

    def representative(self, indices) -> np.ndarray:
        """Cell centers for the given indices, NaN rows for the sink."""
        indices = np.asarray(indices)
        safe = np.where(indices == self.sink_index, 0, indices)
        reps = self.centers[safe]
        return np.where((indices == self.sink_index)[..., None], np.nan, reps)

    def quantize(self, points) -> np.ndarray:
        return self.representative(self.locate(points))


def build_partition(lower: Sequence[float], upper: Sequence[float], widths: Sequence[float]) -> GridPartition:
    """Uniform partition of the box; the upper bound is extended when widths do not divide it.

    Args:
        lower: Lower corner of the box.
        upper: Upper corner of the box.
        widths: Cell width per dimension.

    Returns:
        GridPartition, with ``extended`` set when the box had to grow.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    widths = np.atleast_1d(np.asarray(widths, dtype=float))
    if not (lower.shape == upper.shape == widths.shape):
        raise DimensionError("widths", lower.shape, widths.shape)
    if np.any(widths <= 0):
        raise ValueError("cell widths must be positive")
    if np.any(upper <= lower):
        raise ValueError("box upper bound must exceed lower bound")

    ratio = (upper - lower) / widths
    counts = np.ceil(ratio - 1e-12).astype(int)
    counts = np.maximum(counts, 1)
    new_upper = lower + counts * widths
    extended = bool(np.any(np.abs(new_upper - upper) > 1e-12 * np.maximum(1.0, np.abs(upper))))
    if extended:
        print(f"Warning: box upper bound extended from {upper.tolist()} to {new_upper.tolist()}")
    else:
        new_upper = upper
    for arr in (lower, new_upper, widths):
        arr.setflags(write=False)
    return GridPartition(lower, new_upper, widths, tuple(int(c) for c in counts), extended)


def pi_x(part: GridPartition, point) -> Tuple[np.ndarray, int]:
    """Representative and cell index of a single point (NaN representative in the sink)."""
    idx = int(part.locate(point))
    return part.representative(idx), idx


def _cell_masses(part: GridPartition, means: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Gaussian mass of every cell under independent coordinates, batched over means."""
    joint = None
    for d in range(part.dim):
        mu = means[..., d]
        if sigma[d] > 0.0:
            cdf = special.ndtr((part.edges(d) - mu[..., None]) / sigma[d])
            masses = np.diff(cdf, axis=-1)
        else:
            cells = np.arange(part.counts[d])
            k = np.floor((mu - part.lower[d]) / part.widths[d])
            k = np.where(mu == part.upper[d], part.counts[d] - 1, k)
            masses = (cells == k[..., None]).astype(float)
        if joint is None:
            joint = masses
        else:
            joint = (joint[..., :, None] * masses[..., None, :]).reshape(masses.shape[:-1] + (-1,))
    return joint


def _diagonal_sigma(R_hat: np.ndarray) -> Optional[np.ndarray]:
    cov = R_hat @ R_hat.T
    off = cov - np.diag(np.diag(cov))
    scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
    if np.max(np.abs(off), initial=0.0) > 1e-15 * scale:
        return None
    return np.sqrt(np.diag(cov))


@dataclass
class TransitionRow:
    probs: np.ndarray
    std_error: float = 0.0


def transition_row(absr: NonlinearSystemTuple, part: GridPartition, xhat, what, nuhat,
                   rng: Optional[np.random.Generator] = None, samples: int = MC_ROW_SAMPLES) -> TransitionRow:
    """Probabilities of landing in each cell (and the sink, last) after one step.

    Args:
        absr: Reduced-order system.
        part: State partition.
        xhat: Current representative.
        what: Abstract internal input.
        nuhat: Abstract external input.
        rng: Generator for the Monte Carlo fallback.
        samples: Monte Carlo sample count.

    Returns:
        TransitionRow with the probability vector and its standard error
        (zero for exact rows).
    """
    if absr.n != part.dim:
        raise DimensionError("partition", absr.n, part.dim)
    mean = step_dynamics(absr, xhat, what, nuhat, np.zeros(absr.s))
    probs = np.zeros(part.n_cells + 1)
    if not np.all(np.isfinite(mean)):
        probs[part.sink_index] = 1.0
        return TransitionRow(probs)

    sigma = _diagonal_sigma(absr.R)
    if sigma is not None:
        probs[:-1] = _cell_masses(part, mean, sigma)
        probs[-1] = max(0.0, 1.0 - probs[:-1].sum())
        return TransitionRow(probs)

    rng = rng if rng is not None else np.random.default_rng(DEFAULT_SEED)
    pts = mean + rng.standard_normal((samples, absr.s)) @ absr.R.T
    counts = np.bincount(part.locate(pts), minlength=part.n_cells + 1)
    probs = counts / samples
    std_error = float(np.max(np.sqrt(probs * (1.0 - probs) / samples)))
    return TransitionRow(probs, std_error)


@dataclass(eq=False)
class FiniteMdp:
    """Finite MDP with transition tensor T[state, w-input, u-input, next-state]."""

    transitions: np.ndarray
    states: np.ndarray
    internal_inputs: np.ndarray
    external_inputs: np.ndarray
    initial_state: int = 0
    sink_index: Optional[int] = None
    output_matrix: Optional[np.ndarray] = None
    std_errors: Optional[np.ndarray] = None
    partition: Optional[GridPartition] = field(default=None, repr=False)

    def __post_init__(self):
        S, W, U, S2 = self.transitions.shape
        if S != S2 or len(self.states) != S:
            raise DimensionError("transitions", (len(self.states), W, U, len(self.states)), self.transitions.shape)
        if len(self.internal_inputs) != W or len(self.external_inputs) != U:
            raise DimensionError("inputs", (W, U), (len(self.internal_inputs), len(self.external_inputs)))

    @classmethod
    def from_tensor(cls, transitions, initial_state: int = 0, sink_index: Optional[int] = None) -> "FiniteMdp":
        """MDP over labelled states 0..S-1 and inputs 0..W-1, 0..U-1."""
        T = np.asarray(transitions, dtype=float)
        if T.ndim == 3:
            T = T[:, None, :, :]
        S, W, U, _ = T.shape
        return cls(T, np.arange(S, dtype=float)[:, None], np.arange(W, dtype=float)[:, None],
                   np.arange(U, dtype=float)[:, None], initial_state, sink_index)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_internal(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_external(self) -> int:
        return self.transitions.shape[2]

    @property
    def outputs(self) -> np.ndarray:
        """Output of every state (NaN for the sink)."""
        C = self.output_matrix if self.output_matrix is not None else np.eye(self.states.shape[1])
        return self.states @ C.T

    def row_error(self) -> float:
        return float(np.max(np.abs(self.transitions.sum(axis=-1) - 1.0)))

    def validate(self, tol: float = TOL_ROW) -> None:
        if np.any(self.transitions < 0.0):
            raise ValueError("negative transition probability")
        error = self.row_error()
        if error > tol:
            raise ValueError(f"transition rows deviate from 1 by {error:.3g}")
        if self.sink_index is not None:
            sink_rows = self.transitions[self.sink_index]
            if not np.all(sink_rows[..., self.sink_index] == 1.0):
                raise ValueError("sink is not absorbing")


def estimate_mdp_megabytes(n_states: int, n_internal: int, n_external: int) -> float:
    return n_states * n_internal * n_external * n_states * 8 / 2 ** 20


def build_finite_mdp(absr: NonlinearSystemTuple, part: GridPartition, internal_inputs, external_inputs, x0,
                     seed: int = DEFAULT_SEED, samples: int = MC_ROW_SAMPLES,
                     memory_cap_mb: float = MEMORY_CAP_MB, threads: int = 1) -> FiniteMdp:
    """Assemble the transition tensor for every (state, internal input, external input).

    Args:
        absr: Reduced-order system.
        part: State partition.
        internal_inputs: Representative internal inputs, one per row.
        external_inputs: Representative external inputs, one per row.
        x0: Abstract initial state, quantized to its cell.
        seed: Seed of the Monte Carlo rows (unused for exact rows).
        samples: Monte Carlo samples per row.
        memory_cap_mb: Refuse tensors larger than this.
        threads: Worker threads; results do not depend on it.

    Returns:
        Validated FiniteMdp.
    """
    W = np.asarray(internal_inputs, dtype=float).reshape(-1, absr.p) if absr.p else np.zeros((1, 0))
    U = np.asarray(external_inputs, dtype=float).reshape(-1, absr.m)
    n_states = part.n_cells + 1
    estimate = estimate_mdp_megabytes(n_states, len(W), len(U))
    if estimate > memory_cap_mb:
        raise ResourceCapError("finite MDP transition tensor", estimate, memory_cap_mb)

    sigma = _diagonal_sigma(absr.R)
    centers = part.centers

    def build_state(i: int) -> Tuple[np.ndarray, np.ndarray]:
        rows = np.zeros((len(W), len(U), n_states))
        errors = np.zeros((len(W), len(U)))
        xhat = centers[i]
        if sigma is not None:
            means = step_dynamics(absr, xhat, W[:, None, :], U[None, :, :], np.zeros(absr.s))
            rows[..., :-1] = _cell_masses(part, means, sigma)
            rows[..., -1] = np.maximum(0.0, 1.0 - rows[..., :-1].sum(axis=-1))
            return rows, errors
        for a in range(len(W)):
            for b in range(len(U)):
                seq = np.random.SeedSequence(entropy=seed, spawn_key=(i, a, b))
                row = transition_row(absr, part, xhat, W[a], U[b], np.random.Generator(np.random.Philox(seq)), samples)
                rows[a, b] = row.probs
                errors[a, b] = row.std_error
        return rows, errors

    results = run_parallel(build_state, list(range(part.n_cells)), threads)
    transitions = np.zeros((n_states, len(W), len(U), n_states))
    std_errors = np.zeros((n_states, len(W), len(U)))
    for i, (rows, errors) in enumerate(results):
        transitions[i] = rows
        std_errors[i] = errors
    transitions[part.sink_index, :, :, part.sink_index] = 1.0

    states = np.vstack([centers, np.full((1, part.dim), np.nan)])
    mdp = FiniteMdp(transitions, states, W, U, int(part.locate(x0)), part.sink_index,
                    absr.C, std_errors, part)
    mdp.validate()
    return mdp


def tube_probability(mdp: FiniteMdp, policy, tube) -> float:
    """Probability that the abstract output trajectory stays inside a box tube.

    Runs the tube recursion backwards from the last step with the policy's
    inputs fixed. Where the policy leaves the internal input open the
    environment picks the worst one per state and step, as the synthesis
    backup does.

    Args:
        mdp: Finite MDP with an output matrix.
        policy: FinitePolicy-like object with ``action(k, state) -> (w, u)``;
            ``w < 0`` marks an open internal input.
        tube: EventTube-like object with ``lower``/``upper`` arrays (T+1, q).

    Returns:
        Probability of the tube event from the initial state.
    """
    if getattr(tube, "empty", False):
        return 0.0
    outputs = mdp.outputs
    horizon = len(tube.lower) - 1

    def inside(k: int) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.all((outputs >= tube.lower[k]) & (outputs <= tube.upper[k]), axis=-1)

    values = inside(horizon).astype(float)
    for k in range(horizon - 1, -1, -1):
        expected = mdp.transitions @ values  # (S, W, U)
        step = np.zeros(mdp.n_states)
        for s in np.nonzero(inside(k))[0]:
            w, u = policy.action(k, s)
            step[s] = expected[s, :, u].min() if w < 0 else expected[s, w, u]
        values = step
    return float(values[mdp.initial_state])


def product_tube_probability(factors: Sequence[Tuple[FiniteMdp, object]], tube,
                             slices: Sequence[Sequence[int]]) -> float:
    """Tube probability on a product of independent MDPs.

    Each factor is an (mdp, policy) pair owning the output coordinates in the
    matching entry of ``slices``. The tube event factorizes over the factors
    because their noise is independent and no factor drives another.
    """
    if len(factors) != len(slices):
        raise ValueError(f"{len(factors)} factors but {len(slices)} output slices")
    if getattr(tube, "empty", False):
        return 0.0
    prob = 1.0
    for (mdp, policy), columns in zip(factors, slices):
        prob *= tube_probability(mdp, policy, tube.restrict(columns))
    return prob


def _json_rows(arr: np.ndarray) -> List[List[Optional[float]]]:
    return [[None if math.isnan(v) else float(v) for v in row] for row in np.asarray(arr, dtype=float)]


def write_mdp(mdp: FiniteMdp, path: Path) -> None:
    """Write the MDP as a JSON header line followed by sparse CSV triples."""
    header = {
        "format_version": FORMAT_VERSION,
        "n_states": mdp.n_states,
        "n_internal": mdp.n_internal,
        "n_external": mdp.n_external,
        "initial_state": mdp.initial_state,
        "sink_index": mdp.sink_index,
        "states": _json_rows(mdp.states),
        "internal_inputs": _json_rows(mdp.internal_inputs),
        "external_inputs": _json_rows(mdp.external_inputs),
        "output_matrix": None if mdp.output_matrix is None else _json_rows(mdp.output_matrix),
    }
    src, w, u, dst = np.nonzero(mdp.transitions)
    df = pd.DataFrame({"from": src, "w": w, "u": u, "to": dst})
    df["prob"] = [f"{p:.16e}" for p in mdp.transitions[src, w, u, dst]]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("% " + json.dumps(header, sort_keys=True) + "\n")
        df.to_csv(f, index=False, columns=MDP_COLUMNS)


def read_mdp(path: Path) -> FiniteMdp:
    """Read an MDP written by write_mdp."""
    with open(path, "r") as f:
        first = f.readline()
        if not first.startswith("% "):
            raise ValueError(f"{path}: missing MDP header line")
        header = json.loads(first[2:])
        df = pd.read_csv(f, float_precision="round_trip")

    def rows(value):
        return np.array([[np.nan if v is None else v for v in row] for row in value], dtype=float)

    shape = (header["n_states"], header["n_internal"], header["n_external"], header["n_states"])
    transitions = np.zeros(shape)
    transitions[df["from"].to_numpy(), df["w"].to_numpy(), df["u"].to_numpy(), df["to"].to_numpy()] = \
        df["prob"].to_numpy(dtype=float)
    internal = rows(header["internal_inputs"])
    if internal.size == 0:
        internal = np.zeros((header["n_internal"], 0))
    output_matrix = None if header["output_matrix"] is None else rows(header["output_matrix"])
    return FiniteMdp(transitions, rows(header["states"]), internal, rows(header["external_inputs"]),
                     header["initial_state"], header["sink_index"], output_matrix)
