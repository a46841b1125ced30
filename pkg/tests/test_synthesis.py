"""Tests for simrel.synthesis module."""

import itertools

import numpy as np
import pytest

from simrel.abstraction import FiniteMdp, build_finite_mdp, build_partition
from simrel.guarantees import ClosenessCertificate
from simrel.models import NonlinearSystemTuple
from simrel.synthesis import (
    OPEN_INPUT,
    REACHABILITY,
    SAFETY,
    FinitePolicy,
    SpecHorizon,
    dp_reach,
    dp_safety,
    guarantee_transfer,
    read_policy,
    refine_policy,
    tabulate_level_policy,
    write_policy,
)


def two_input_mdp():
    """State 0 is safe; input a stays with 0.9, input b with 0.5; state 1 absorbs."""
    T = np.zeros((2, 2, 2))
    T[0, 0] = [0.9, 0.1]
    T[0, 1] = [0.5, 0.5]
    T[1, :, 1] = 1.0
    return FiniteMdp.from_tensor(T)


def internal_choice_mdp():
    """Safe state 0 with two internal and two external inputs; state 1 absorbs."""
    T = np.zeros((2, 2, 2, 2))
    stay = {(0, 0): 1.0, (1, 0): 0.5, (0, 1): 0.8, (1, 1): 0.7}
    for (w, u), p in stay.items():
        T[0, w, u] = [p, 1.0 - p]
    T[1, :, :, 1] = 1.0
    states = np.arange(2.0)[:, None]
    return FiniteMdp(T, states, np.arange(2.0)[:, None], np.arange(2.0)[:, None])


class TestDpSafety:
    """Tests for the safety dynamic program."""

    def test_two_steps(self):
        """Test that staying twice with the better input gives 0.81."""
        V, policy = dp_safety(two_input_mdp(), SpecHorizon.constant(SAFETY, [0], 2))

        assert V[0, 0] == pytest.approx(0.81)
        assert V[2].tolist() == [1.0, 0.0]
        assert policy.action(0, 0) == (0, 0)
        assert policy.action(1, 0) == (0, 0)

    def test_sink_leak(self):
        """Test a 0.001 leak to the sink over ten steps gives 0.999^10."""
        T = np.zeros((2, 1, 2))
        T[0, 0] = [0.999, 0.001]
        T[1, 0] = [0.0, 1.0]
        mdp = FiniteMdp.from_tensor(T, sink_index=1)

        V, _ = dp_safety(mdp, SpecHorizon.constant(SAFETY, [0], 10))

        assert V[0, 0] == pytest.approx(0.999 ** 10, rel=1e-12)

    def test_matches_exhaustive_search(self):
        """Test the optimal value against every deterministic Markov policy on a dyadic MDP."""
        T = np.zeros((3, 2, 3))
        T[0, 0] = [0.5, 0.25, 0.25]
        T[0, 1] = [0.25, 0.75, 0.0]
        T[1, 0] = [0.5, 0.0, 0.5]
        T[1, 1] = [0.125, 0.625, 0.25]
        T[2, :, 2] = 1.0
        mdp = FiniteMdp.from_tensor(T)
        horizon = 3
        spec = SpecHorizon.constant(SAFETY, [0, 1], horizon)

        V, _ = dp_safety(mdp, spec)

        best = 0.0
        for choice in itertools.product([0, 1], repeat=2 * horizon):
            dist = np.array([1.0, 0.0, 0.0])
            for k in range(horizon):
                step = np.zeros(3)
                for s in (0, 1):
                    step += dist[s] * T[s, choice[2 * k + s]]
                dist = step
            best = max(best, dist[0] + dist[1])
        assert V[0, 0] == best

    def test_internal_input_modes(self):
        """Test free, fixed and adversarial internal inputs."""
        mdp = internal_choice_mdp()
        spec = SpecHorizon.constant(SAFETY, [0], 1)

        free_V, free = dp_safety(mdp, spec)
        fixed_V, fixed = dp_safety(mdp, spec, internal_input=1)
        worst_V, worst = dp_safety(mdp, spec, internal_input="worst")

        assert free_V[0, 0] == 1.0
        assert free.action(0, 0) == (0, 0)
        assert fixed_V[0, 0] == pytest.approx(0.7)
        assert fixed.action(0, 0) == (1, 1)
        assert worst_V[0, 0] == pytest.approx(0.7)
        assert worst.action(0, 0) == (OPEN_INPUT, 1)

    def test_rejects_invalid_mode(self):
        """Test that an out-of-range internal input index is refused."""
        with pytest.raises(ValueError, match="internal input"):
            dp_safety(internal_choice_mdp(), SpecHorizon.constant(SAFETY, [0], 1), internal_input=5)

    def test_sink_cannot_be_safe(self):
        """Test that a safe set containing the sink is refused."""
        mdp = FiniteMdp.from_tensor(np.eye(2)[:, None, :], sink_index=1)

        with pytest.raises(ValueError, match="sink"):
            dp_safety(mdp, SpecHorizon.constant(SAFETY, [0, 1], 2))

    def test_rejects_wrong_kind(self):
        """Test that a reachability specification is refused."""
        with pytest.raises(ValueError, match="safety"):
            dp_safety(two_input_mdp(), SpecHorizon.constant(REACHABILITY, [0], 2))

    def test_horizon_mismatch(self):
        """Test that the expected horizon is checked."""
        with pytest.raises(ValueError, match="horizon"):
            dp_safety(two_input_mdp(), SpecHorizon.constant(SAFETY, [0], 2), horizon=3)


class TestDpReach:
    """Tests for the reachability dynamic program."""

    def test_single_chance(self):
        """Test a target hit with 0.25 on the first step and never again."""
        T = np.zeros((3, 1, 3))
        T[0, 0] = [0.0, 0.75, 0.25]
        T[1, 0, 1] = 1.0
        T[2, 0, 2] = 1.0
        mdp = FiniteMdp.from_tensor(T)

        V, _ = dp_reach(mdp, SpecHorizon.constant(REACHABILITY, [2], 3))

        assert V[0, 0] == pytest.approx(0.25)
        assert V[0, 2] == 1.0

    def test_picks_faster_input(self):
        """Test that the policy prefers the input with the higher hit rate."""
        T = np.zeros((2, 2, 2))
        T[0, 0] = [0.9, 0.1]
        T[0, 1] = [0.6, 0.4]
        T[1, :, 1] = 1.0

        V, policy = dp_reach(FiniteMdp.from_tensor(T), SpecHorizon.constant(REACHABILITY, [1], 1))

        assert V[0, 0] == pytest.approx(0.4)
        assert policy.action(0, 0) == (0, 1)


class TestFinitePolicy:
    """Tests for policy tables and their file format."""

    def test_write_read(self, tmp_path):
        """Test that the CSV table keeps every entry."""
        _, policy = dp_safety(internal_choice_mdp(), SpecHorizon.constant(SAFETY, [0], 3), internal_input="worst")
        path = tmp_path / "policy_0.csv"

        write_policy(policy, path)
        loaded = read_policy(path)

        assert path.read_text().startswith("% format_version")
        assert np.array_equal(loaded.table, policy.table)

    def test_to_frame(self):
        """Test one row per (step, state)."""
        policy = FinitePolicy(np.zeros((3, 4, 2), dtype=np.int64))

        assert len(policy.to_frame()) == 12


class TestTabulateLevelPolicy:
    """Tests for writing the validation input policy over MDP states."""

    @pytest.fixture
    def feedback_mdp(self):
        system = NonlinearSystemTuple.linear([[0.5]], [[1.0]], [[1.0]], np.zeros((1, 0)), [[1.0]])
        part = build_partition([-3.0], [3.0], [1.0])
        return system, build_finite_mdp(system, part, [], [[-1.0], [0.0], [1.0]], [0.5])

    def test_feedback(self, feedback_mdp):
        """Test that each cell center picks the level closest to cancelling 0.5 x."""
        system, mdp = feedback_mdp

        policy = tabulate_level_policy(mdp, system, [[-1.0], [0.0], [1.0]], "feedback", 3)

        assert policy.horizon == 3
        assert policy.table[0, :6, 1].tolist() == [2, 2, 1, 1, 0, 0]
        assert np.all(policy.table[..., 0] == 0)
        assert np.array_equal(policy.table[0], policy.table[2])

    def test_zero(self, feedback_mdp):
        """Test that the zero policy uses the zero level everywhere."""
        system, mdp = feedback_mdp

        policy = tabulate_level_policy(mdp, system, [[-1.0], [0.0], [1.0]], "zero", 2)

        assert np.all(policy.table[..., 1] == 1)

    def test_case_study_zero_internal_input(self, case_sub):
        """Test that the zero internal input level is located among the MDP levels."""
        mdp = build_finite_mdp(case_sub.abstract, case_sub.partition(), case_sub.internal_input_levels(),
                               case_sub.abstraction["external_inputs"], case_sub.abstraction["x0"])

        policy = tabulate_level_policy(mdp, case_sub.abstract, case_sub.abstraction["external_inputs"], "zero", 1)

        assert np.all(policy.table[..., 0] == 1)
        assert np.all(policy.table[..., 1] == 1)

    def test_not_tabulable(self, feedback_mdp):
        """Test that random levels and a missing zero level give no table."""
        system, mdp = feedback_mdp
        no_zero = build_finite_mdp(system, build_partition([-3.0], [3.0], [1.0]), [], [[-1.0], [1.0]], [0.5])

        assert tabulate_level_policy(mdp, system, [[-1.0], [0.0], [1.0]], "random", 2) is None
        assert tabulate_level_policy(no_zero, system, [[-1.0], [1.0]], "zero", 2) is None


class TestGuaranteeTransfer:
    """Tests for transferring the abstract value to the concrete system."""

    def test_subtracts_gamma(self):
        """Test v_hat = 1 with gamma = 0.0325 gives 0.9675."""
        cert = ClosenessCertificate(5.0, 0.003, 10, 0.0325)

        assert guarantee_transfer(1.0, cert) == pytest.approx(0.9675)

    def test_clamped(self):
        """Test that the bound never goes negative."""
        assert guarantee_transfer(0.01, ClosenessCertificate(5.0, 0.1, 10, 0.5)) == 0.0


class TestRefinePolicy:
    """Tests for the refined concrete controller."""

    @pytest.fixture
    def controller_parts(self, scalar_system):
        part = build_partition([-2.0], [2.0], [0.5])
        mdp = build_finite_mdp(scalar_system, part, [[0.0]], [[-0.5], [0.0], [0.5]], [0.25])
        _, policy = dp_safety(mdp, SpecHorizon.constant(SAFETY, range(part.n_cells), 5))
        return part, mdp, policy

    def test_input_follows_policy(self, controller_parts, scalar_system, identity_certificate):
        """Test that the passthrough interface applies the abstract input of the policy."""
        part, mdp, policy = controller_parts
        ctrl = refine_policy(policy, mdp, identity_certificate, scalar_system, scalar_system)

        nu = ctrl.input([0.25], [0.0])

        _, u = policy.action(0, ctrl.state)
        assert ctrl.xhat[0] == pytest.approx(0.25)
        assert nu == pytest.approx(mdp.external_inputs[u])

    def test_advance_reconstructs_noise(self, controller_parts, scalar_system, identity_certificate):
        """Test that the companion moves to the cell of the noise-consistent successor."""
        part, mdp, policy = controller_parts
        ctrl = refine_policy(policy, mdp, identity_certificate, scalar_system, scalar_system)
        x = np.array([0.25])

        nu = ctrl.input(x, [0.0])
        x_next = 0.5 * x + nu + 0.1
        ctrl.advance(x_next)

        assert ctrl.k == 1
        assert ctrl.state == part.locate(x_next)
        assert ctrl.xhat == pytest.approx(part.representative(ctrl.state))
        assert not ctrl.forfeited

    def test_leaving_the_box_forfeits(self, controller_parts, scalar_system, identity_certificate):
        """Test that a companion pushed into the sink forfeits the guarantee."""
        part, mdp, policy = controller_parts
        ctrl = refine_policy(policy, mdp, identity_certificate, scalar_system, scalar_system)

        ctrl.input([0.25], [0.0])
        ctrl.advance([50.0], zeta=[50.0])

        assert ctrl.forfeited
        assert ctrl.trace[-1]["forfeited"]

    def test_advance_before_input(self, controller_parts, scalar_system, identity_certificate):
        """Test that advance needs a pending input."""
        part, mdp, policy = controller_parts
        ctrl = refine_policy(policy, mdp, identity_certificate, scalar_system, scalar_system)

        with pytest.raises(ValueError, match="before input"):
            ctrl.advance([0.0])

    def test_horizon_exhausted(self, controller_parts, scalar_system, identity_certificate):
        """Test that the controller stops after the policy horizon."""
        part, mdp, policy = controller_parts
        ctrl = refine_policy(policy, mdp, identity_certificate, scalar_system, scalar_system)
        for _ in range(policy.horizon):
            ctrl.input(ctrl.xhat, [0.0])
            ctrl.advance(ctrl.xhat, zeta=[0.0])

        with pytest.raises(ValueError, match="exhausted"):
            ctrl.input(ctrl.xhat, [0.0])
