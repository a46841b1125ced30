"""Finite-horizon synthesis on a finite MDP and refinement to the concrete system."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .abstraction import FiniteMdp, GridPartition
from .certification import RelationCertificate
from .config import FORMAT_VERSION
from .guarantees import ClosenessCertificate
from .models import NonlinearSystemTuple, _check_vector, step_dynamics
from .relations import refine_input

SAFETY = "safety"
REACHABILITY = "reachability"

# Internal input left to the environment
OPEN_INPUT = -1

InternalInputMode = Union[None, int, str]


@dataclass(frozen=True)
class SpecHorizon:
    """Per-step safe (or target) state sets for steps 0..T."""

    kind: str
    sets: Tuple[FrozenSet[int], ...]

    def __post_init__(self):
        if self.kind not in (SAFETY, REACHABILITY):
            raise ValueError(f"unknown specification kind '{self.kind}'")
        object.__setattr__(self, "sets", tuple(frozenset(int(s) for s in step) for step in self.sets))
        if not self.sets:
            raise ValueError("specification needs at least one step")

    @classmethod
    def constant(cls, kind: str, states: Sequence[int], horizon: int) -> "SpecHorizon":
        return cls(kind, tuple(frozenset(states) for _ in range(horizon + 1)))

    @property
    def horizon(self) -> int:
        return len(self.sets) - 1

    def mask(self, k: int, n_states: int) -> np.ndarray:
        m = np.zeros(n_states, dtype=bool)
        m[list(self.sets[k])] = True
        return m


@dataclass(eq=False)
class FinitePolicy:
    """Table (k, state) -> (internal input index or OPEN_INPUT, external input index)."""

    table: np.ndarray

    @property
    def horizon(self) -> int:
        return self.table.shape[0]

    def action(self, k: int, state: int) -> Tuple[int, int]:
        w, u = self.table[k, state]
        return int(w), int(u)

    def to_frame(self) -> pd.DataFrame:
        T, S, _ = self.table.shape
        k, s = np.meshgrid(np.arange(T), np.arange(S), indexing="ij")
        return pd.DataFrame({"k": k.ravel(), "state": s.ravel(),
                             "w": self.table[..., 0].ravel(), "u": self.table[..., 1].ravel()})


def _level_index(levels: np.ndarray, value: np.ndarray) -> Optional[int]:
    hits = np.nonzero(np.all(np.isclose(levels, value, rtol=0.0, atol=1e-12), axis=1))[0]
    return int(hits[0]) if len(hits) else None


def tabulate_level_policy(mdp: FiniteMdp, absr: NonlinearSystemTuple, levels, mode: str,
                          horizon: int) -> Optional[FinitePolicy]:
    """The zero or feedback level policy as a table over the MDP's states.

    Feedback picks, per cell center, the level minimizing the norm of the
    noise-free successor with no internal input, as ``level_policy`` does.
    Returns None when the policy cannot be written over the MDP's inputs:
    random levels, a level missing from the MDP, or no zero internal input.
    """
    levels = np.asarray(levels, dtype=float).reshape(-1, absr.m)
    w_idx = 0 if mdp.n_internal == 1 else _level_index(mdp.internal_inputs, np.zeros(mdp.internal_inputs.shape[1]))
    if w_idx is None:
        return None
    if mode == "zero":
        chosen = np.zeros((mdp.n_states, absr.m))
    elif mode == "feedback":
        centers = np.nan_to_num(mdp.states)
        drift = centers @ absr.A.T + absr.nonlinear_term(centers)
        cand = drift[:, None, :] + (levels @ absr.B.T)[None, :, :]
        chosen = levels[np.argmin(np.linalg.norm(cand, axis=-1), axis=1)]
    else:
        return None
    u_idx = [_level_index(mdp.external_inputs, level) for level in chosen]
    if any(u is None for u in u_idx):
        return None
    table = np.zeros((horizon, mdp.n_states, 2), dtype=np.int64)
    table[..., 0] = w_idx
    table[..., 1] = u_idx
    return FinitePolicy(table)


def write_policy(policy: FinitePolicy, path: Path) -> None:
    """Dense policy table as CSV after a format header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"% format_version {FORMAT_VERSION}\n")
        policy.to_frame().to_csv(f, index=False)


def read_policy(path: Path) -> FinitePolicy:
    with open(path, "r") as f:
        f.readline()
        df = pd.read_csv(f)
    T, S = int(df["k"].max()) + 1, int(df["state"].max()) + 1
    table = np.zeros((T, S, 2), dtype=np.int64)
    table[df["k"], df["state"], 0] = df["w"]
    table[df["k"], df["state"], 1] = df["u"]
    return FinitePolicy(table)


def _backup(mdp: FiniteMdp, values: np.ndarray, internal_input: InternalInputMode) -> Tuple[np.ndarray, np.ndarray]:
    """One Bellman backup; returns (best value per state, (w, u) choice per state)."""
    expected = mdp.transitions @ values  # (S, W, U)
    S, W, U = expected.shape
    choice = np.zeros((S, 2), dtype=np.int64)
    if internal_input is None:
        flat = expected.reshape(S, W * U)
        best = np.argmax(flat, axis=1)
        choice[:, 0], choice[:, 1] = np.divmod(best, U)
        return flat[np.arange(S), best], choice
    if internal_input == "worst":
        guaranteed = expected.min(axis=1)
        best = np.argmax(guaranteed, axis=1)
        choice[:, 0] = OPEN_INPUT
        choice[:, 1] = best
        return guaranteed[np.arange(S), best], choice
    if isinstance(internal_input, (int, np.integer)) and 0 <= internal_input < W:
        fixed = expected[:, internal_input, :]
        best = np.argmax(fixed, axis=1)
        choice[:, 0] = internal_input
        choice[:, 1] = best
        return fixed[np.arange(S), best], choice
    raise ValueError(f"invalid internal input mode {internal_input!r}")


def _check_spec(mdp: FiniteMdp, spec: SpecHorizon, kind: str, horizon: Optional[int]) -> None:
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} specification, got {spec.kind}")
    if horizon is not None and horizon != spec.horizon:
        raise ValueError(f"horizon mismatch: MDP run for {horizon} steps, specification has {spec.horizon}")
    if mdp.sink_index is not None and any(mdp.sink_index in s for s in spec.sets):
        raise ValueError("sink state cannot be safe or a target")
    if any(s >= mdp.n_states or s < 0 for step in spec.sets for s in step):
        raise ValueError("specification names states outside the MDP")


def dp_safety(mdp: FiniteMdp, spec: SpecHorizon, internal_input: InternalInputMode = None,
              horizon: Optional[int] = None) -> Tuple[np.ndarray, FinitePolicy]:
    """Maximal probability of staying in the safe sets over steps 0..T.

    Args:
        mdp: Finite MDP.
        spec: Safety specification.
        internal_input: None lets the policy pick the internal input, an index
            fixes it, "worst" assumes it is chosen adversarially after the
            external input.
        horizon: Expected horizon, checked against the specification.

    Returns:
        Value table V of shape (T+1, S) and the maximizing policy
        (lowest index on ties).
    """
    _check_spec(mdp, spec, SAFETY, horizon)
    T, S = spec.horizon, mdp.n_states
    V = np.zeros((T + 1, S))
    table = np.zeros((T, S, 2), dtype=np.int64)
    V[T] = spec.mask(T, S).astype(float)
    for k in range(T - 1, -1, -1):
        best, choice = _backup(mdp, V[k + 1], internal_input)
        V[k] = np.where(spec.mask(k, S), best, 0.0)
        table[k] = choice
    return V, FinitePolicy(table)


def dp_reach(mdp: FiniteMdp, spec: SpecHorizon, internal_input: InternalInputMode = None,
             horizon: Optional[int] = None) -> Tuple[np.ndarray, FinitePolicy]:
    """Maximal probability of reaching the target sets within T steps."""
    _check_spec(mdp, spec, REACHABILITY, horizon)
    T, S = spec.horizon, mdp.n_states
    V = np.zeros((T + 1, S))
    table = np.zeros((T, S, 2), dtype=np.int64)
    V[T] = spec.mask(T, S).astype(float)
    for k in range(T - 1, -1, -1):
        best, choice = _backup(mdp, V[k + 1], internal_input)
        V[k] = np.where(spec.mask(k, S), 1.0, best)
        table[k] = choice
    return V, FinitePolicy(table)


def guarantee_transfer(v_hat: float, cert: ClosenessCertificate) -> float:
    """Concrete lower bound max(0, v_hat - gamma)."""
    return max(0.0, v_hat - cert.gamma)


@dataclass
class RefinedController:
    """Concrete controller that tracks an abstract companion state.

    Each step reads the policy at the companion's cell, refines the abstract
    input through the interface function and advances the companion with the
    same noise realization as the concrete system.
    """

    policy: FinitePolicy
    mdp: FiniteMdp
    concrete: NonlinearSystemTuple
    abstract: NonlinearSystemTuple
    certificate: RelationCertificate
    partition: GridPartition
    xhat: np.ndarray = None
    k: int = 0
    forfeited: bool = False
    state: int = field(default=0, init=False)
    trace: List[Dict] = field(default_factory=list)
    _pending: Optional[Tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.xhat is None:
            self.xhat = self.mdp.states[self.mdp.initial_state]
        self.xhat = np.asarray(self.xhat, dtype=float)
        self.state = int(self.partition.locate(self.xhat))
        if self.state == self.partition.sink_index:
            self.forfeited = True

    def _abstract_internal(self, w) -> Tuple[int, np.ndarray]:
        reps = self.mdp.internal_inputs
        if reps.shape[1] == 0:
            return 0, reps[0]
        Pw = self.certificate.input_relation.Pw
        dist = np.linalg.norm(_check_vector(w, Pw.shape[0], "w") - reps @ Pw.T, axis=-1)
        idx = int(np.argmin(dist))
        return idx, reps[idx]

    def input(self, x, w=None) -> np.ndarray:
        """Concrete input at the current step for concrete state x and measured internal input w."""
        if self.k >= self.policy.horizon:
            raise ValueError("controller horizon exhausted")
        w = np.zeros(self.concrete.p) if w is None else w
        w_idx, w_hat = self._abstract_internal(w)
        w_pol, u_idx = self.policy.action(self.k, self.state)
        if w_pol != OPEN_INPUT:
            w_idx, w_hat = w_pol, self.mdp.internal_inputs[w_pol]
        nu_hat = self.mdp.external_inputs[u_idx]
        nu = refine_input(self.certificate.interface, self.concrete, self.certificate.state_relation,
                          x, self.xhat, w_hat, nu_hat)
        self._pending = (np.asarray(x, dtype=float), np.asarray(w, dtype=float), nu, w_hat, nu_hat)
        self.trace.append({"k": self.k, "state": self.state, "w": w_idx, "u": u_idx, "forfeited": self.forfeited})
        return nu

    def advance(self, x_next, zeta=None) -> None:
        """Advance the companion after the concrete system moved to x_next.

        Without the realized noise it is reconstructed from x_next, which needs
        R with full column rank.
        """
        if self._pending is None:
            raise ValueError("advance called before input")
        x, w, nu, w_hat, nu_hat = self._pending
        self._pending = None
        self.k += 1
        if zeta is None:
            R = self.concrete.R
            if np.linalg.matrix_rank(R) < R.shape[1]:
                raise ValueError("noise cannot be reconstructed; pass the realized noise (co-simulation)")
            residual = np.asarray(x_next, dtype=float) - (x @ self.concrete.A.T + self.concrete.nonlinear_term(x)
                                                           + w @ self.concrete.D.T + nu @ self.concrete.B.T)
            zeta = np.linalg.lstsq(R, residual, rcond=None)[0]
        if self.forfeited:
            return
        raw = step_dynamics(self.abstract, self.xhat, w_hat, nu_hat, zeta)
        self.state = int(self.partition.locate(raw))
        if self.state == self.partition.sink_index:
            self.forfeited = True
            self.trace.append({"k": self.k, "state": self.state, "forfeited": True})
        else:
            self.xhat = self.partition.representative(self.state)


def refine_policy(policy: FinitePolicy, mdp: FiniteMdp, certificate: RelationCertificate,
                  concrete: NonlinearSystemTuple, abstract: NonlinearSystemTuple,
                  partition: Optional[GridPartition] = None, xhat0=None) -> RefinedController:
    """Concrete controller realizing an abstract policy through the certified interface."""
    partition = partition if partition is not None else mdp.partition
    if partition is None:
        raise ValueError("refinement needs the state partition of the abstraction")
    return RefinedController(policy, mdp, concrete, abstract, certificate, partition, xhat0)
