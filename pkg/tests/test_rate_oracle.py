from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxnav.config import ConfigError, JourneyConfig
from cxnav.genome import Genome
from cxnav.rate_oracle import (
    BASELINE, LINEAR, LOGISTIC, NetworkParams, PopulationParams, RateNeuronParams, Topology, cpu1_drive,
    cpu1_rates, cpu4_state_update, decode_home_vector, logistic_response, motor_rates, run_rate_journey,
    run_rate_journey_reference, synaptic_input,
)
from cxnav.trajectory import LOOPING, OUTBOUND, RETURN

CFG = JourneyConfig()


def test_synaptic_input():
    assert synaptic_input([1.0, 2.0], [0.0, 0.0]) == 0.0
    assert synaptic_input([1.0, -1.0], [0.5, 0.5]) == 0.0
    assert synaptic_input([2.0, 3.0], [0.1, 0.2]) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        synaptic_input([1.0], [0.1, 0.2])


class TestLogistic:
    def test_values(self):
        p = RateNeuronParams(a=2.0, b=0.6)
        assert logistic_response(0.3, p) == pytest.approx(0.5)
        assert logistic_response(1e6, p) == 1.0
        assert logistic_response(1.0, RateNeuronParams(1.0, 0.0)) == pytest.approx(0.7311, abs=1e-4)
        assert logistic_response(-1e6, p) == 0.0

    @given(st.floats(-30, 30), st.floats(0.01, 0.5))
    def test_strictly_increasing_and_bounded(self, x, dx):
        p = RateNeuronParams(1.0, 0.0)
        lo, hi = logistic_response(x, p), logistic_response(x + dx, p)
        assert 0.0 < lo < hi < 1.0

    def test_rejects_bad_slope(self):
        with pytest.raises(ValueError):
            RateNeuronParams(a=0.0)

    def test_population_logistic_matches_scalar(self):
        pop = PopulationParams.uniform(3, 2.0, 0.5, LOGISTIC)
        x = np.array([-1.0, 0.25, 2.0])
        assert np.allclose(pop.response(x), [logistic_response(v, RateNeuronParams(2.0, 0.5)) for v in x])


class TestIntegrator:
    def test_examples(self):
        assert cpu4_state_update(504.0, 5, 3, 0.0336, 2) == 504.0
        assert cpu4_state_update(504.0, 10, 0, 0.0336, 2) - 504.0 == pytest.approx(0.2688)
        assert cpu4_state_update(0.0, 0, 10, 0.0336, 2) == 0.0
        assert cpu4_state_update(1008.0, 10, 0, 0.0336, 2) == 1008.0

    @given(st.floats(0, 10), st.floats(0, 10), st.integers(1, 200))
    def test_linearity_without_clamping(self, c_tn, c_tb1, n):
        state = 504.0
        for _ in range(n):
            state = cpu4_state_update(state, c_tn, c_tb1, 0.0336, 2.0)
        assert state == pytest.approx(504.0 + n * 0.0336 * (c_tn - c_tb1 - 2.0), abs=1e-9)


def _matrix_cpu1(r4, tb1, genome, topology):
    """Independent evaluation via explicit adjacency matrices."""
    a_exc = np.zeros((8, 8))
    a_inh = np.zeros((8, 8))
    a_tb1 = np.zeros((8, 4))
    for c in range(8):
        hemi, j = divmod(c, 4)
        a_exc[c, c] = genome.cpu4_to_cpu1_exc[c]
        src_hemi = hemi if topology.inhibition_same_hemisphere else 1 - hemi
        a_inh[c, 4 * src_hemi + (j + 2) % 4] = genome.cpu4_to_cpu1_inh[c]
        off = topology.tb1_offset_left if hemi == 0 else topology.tb1_offset_right
        a_tb1[c, (j + off) % 4] = genome.tb1_to_cpu1[c]
    return a_exc @ r4 - a_inh @ r4 - a_tb1 @ tb1


class TestCpu1:
    def test_symmetric_inputs(self):
        r = cpu1_rates(np.full(8, 0.4), np.full(4, 0.5), Genome.primitive(), NetworkParams.ideal())
        assert np.allclose(r, r[0])

    def test_zero_genome(self):
        p = NetworkParams.ideal()
        r = cpu1_rates(np.random.default_rng(0).random(8), np.full(4, 0.3), Genome.zeros(), p)
        assert np.allclose(r, p.cpu1.response(np.zeros(8)))

    @pytest.mark.parametrize("topology", [Topology(), Topology(1, -1, False)])
    def test_matches_matrix_oracle(self, topology):
        rng = np.random.default_rng(1)
        for _ in range(2):
            genome = Genome.from_vector(rng.uniform(0, 5, 26))
            r4, tb1 = rng.random(8), rng.random(4)
            assert np.allclose(cpu1_drive(r4, tb1, genome, topology), _matrix_cpu1(r4, tb1, genome, topology),
                               atol=1e-12)


class TestMotor:
    def test_symmetric(self):
        c1 = np.tile([0.2, 0.4, 0.6, 0.8], 2)
        m = motor_rates(c1, Genome.primitive())
        assert m[0] == m[1]

    def test_one_sided(self):
        assert motor_rates(np.r_[np.ones(4), np.zeros(4)], Genome.uniform(0, 0, 0, 1)) == (1.0, 0.0)

    def test_weighted_mean(self):
        rng = np.random.default_rng(3)
        c1 = rng.random(8)
        g = Genome.from_vector(rng.uniform(0, 2, 26))
        m = motor_rates(c1, g)
        assert m == pytest.approx((g.cpu1_to_m[0] * c1[:4].mean(), g.cpu1_to_m[1] * c1[4:].mean()))

    def test_linear_transfer_is_identity_inside_range(self):
        assert motor_rates(np.full(8, 0.5), Genome.uniform(0, 0, 0, 1), NetworkParams.ideal()) == pytest.approx((0.5, 0.5))


class TestHomeVector:
    def test_baseline_is_zero(self):
        assert np.array_equal(decode_home_vector(np.full(8, BASELINE)), [0.0, 0.0])

    def test_straight_east_flight_points_home(self):
        state = np.full(8, BASELINE)
        tb1 = np.array([0.5, 1.0, 0.5, 0.0])
        c_tn = 10 * math.sin(math.pi / 4)
        for _ in range(100):
            state = np.array([cpu4_state_update(state[i], c_tn, 10 * tb1[i % 4], 0.0336, 2) for i in range(8)])
        v = decode_home_vector(state)
        assert v[0] < 0 and abs(v[1]) < 1e-9

    def test_index_rotation_rotates_vector(self):
        s = BASELINE + np.random.default_rng(4).normal(0, 30, 8)
        rotated = np.r_[np.roll(s[:4], 1), np.roll(s[4:], 1)]
        v, w = decode_home_vector(s), decode_home_vector(rotated)
        assert w == pytest.approx([v[1], -v[0]], abs=1e-9)


class TestJourney:
    def test_phases_and_length(self):
        traj, log = run_rate_journey(CFG, Genome.primitive(), np.random.default_rng(0))
        assert len(traj) == 2000
        assert (traj.phase[:500] == OUTBOUND).all() and (traj.phase[500:1000] == RETURN).all()
        assert (traj.phase[1000:] == LOOPING).all()
        assert log.cpu4_state.shape == (2000, 8)

    def test_outbound_only_until_last_update(self):
        cfg = replace(CFG, t_return=CFG.t_stop - CFG.dt_update)
        traj, _ = run_rate_journey(cfg, Genome.primitive(), np.random.default_rng(0))
        assert len(traj) == 2000 and (traj.phase == OUTBOUND).sum() == 1999

    def test_rejects_bad_config(self):
        with pytest.raises(ConfigError):
            JourneyConfig(t_return=300_000)

    def test_deterministic(self):
        a, _ = run_rate_journey(CFG, Genome.primitive(), np.random.default_rng(11))
        b, _ = run_rate_journey(CFG, Genome.primitive(), np.random.default_rng(11))
        assert a == b
        assert np.isfinite(a.looping_xy()).all()

    def test_kernel_matches_step_by_step_reference(self):
        params = NetworkParams.ideal()
        rng = np.random.default_rng(5)
        genome = Genome.from_vector(Genome.primitive().to_vector() + rng.normal(0, 0.5, 26))
        fast, flog = run_rate_journey(CFG, genome, np.random.default_rng(9), params)
        slow, slog = run_rate_journey_reference(CFG, genome.clamped(), params, np.random.default_rng(9))
        assert np.allclose(fast.xy, slow.xy, atol=1e-6)
        assert np.allclose(flog.cpu4_state, slog.cpu4_state, atol=1e-9)

    def test_turns_back_after_straight_outbound(self):
        # an exactly straight walk is a mirror-symmetric equilibrium, so keep a trace of noise
        cfg = replace(CFG, world=replace(CFG.world, sigma_walk=1e-3))
        traj, _ = run_rate_journey(cfg, Genome.primitive(), np.random.default_rng(0))
        heading = traj.phi[500:530]
        assert np.any(np.abs(heading) > 0.9 * math.pi)

    @given(st.integers(0, 10 ** 6))
    @settings(max_examples=10, deadline=None)
    def test_quarter_turn_equivariance(self, seed):
        n = CFG.n_return
        _, a = run_rate_journey(CFG, Genome.primitive(), np.random.default_rng(seed))
        _, b = run_rate_journey(CFG, Genome.primitive(), np.random.default_rng(seed), initial_heading=math.pi / 2)
        sa, sb = a.cpu4_state[n - 1], b.cpu4_state[n - 1]
        expected = np.r_[np.roll(sa[:4], -1), np.roll(sa[4:], -1)]
        assert np.allclose(sb, expected, atol=1e-9)
