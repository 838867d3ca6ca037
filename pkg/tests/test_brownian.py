import math

import numpy as np
import pytest
from scipy import stats

from msm.brownian import (ABSORBED, ESCAPED, EXPIRED, MoleculeStream, estimate_hit_probabilities,
                          simulate_emission, step_displacement, stream_key)
from msm.channel import LinkGeometry, slot_probability
from msm.topology import PhysicalParams


def test_same_seed_reproduces_every_path(siso, params):
    a = simulate_emission(siso, params, 0, 3000, 2)
    b = simulate_emission(siso, params, 0, 3000, 2)
    assert np.array_equal(a.status, b.status)
    assert np.array_equal(a.step, b.step)
    assert np.array_equal(a.receiver, b.receiver)


def test_population_prefix_is_stable(siso, params):
    # per-molecule streams: the first molecules do not depend on the population size
    small = simulate_emission(siso, params, 0, 1500, 1)
    big = simulate_emission(siso, params, 0, 4000, 1)
    assert np.array_equal(small.status, big.status[:1500])
    assert np.array_equal(small.step, big.step[:1500])


def test_seed_and_emitter_change_paths(topo_2x1, params):
    a = simulate_emission(topo_2x1, params, 0, 2000, 1)
    b = simulate_emission(topo_2x1, params.with_updates(seed=8), 0, 2000, 1)
    assert not np.array_equal(a.step, b.step)
    assert stream_key(7, 0) != stream_key(7, 1) != stream_key(8, 0)


def test_molecules_are_conserved(topo_2x2, params):
    out = simulate_emission(topo_2x2, params, 1, 5000, 3)
    assert out.absorbed + out.escaped + out.expired == out.M == 5000
    assert out.hits.sum() == out.absorbed
    assert out.hits.shape == (2, 3)
    absorbed = out.status == ABSORBED
    assert np.all(out.receiver[absorbed] >= 0)
    assert np.all(out.receiver[~absorbed] == -1)
    assert np.all(out.step[absorbed] >= 1)
    assert np.all(out.step <= params.steps_per_slot * 3)


def test_paired_receiver_dominates(topo_2x2, params):
    out = simulate_emission(topo_2x2, params, 1, 5000, 1)
    assert out.hits[1, 0] > 3 * out.hits[0, 0]


def test_cumulative_matches_slot_hits(topo_2x1, params):
    out = simulate_emission(topo_2x1, params, 0, 4000, 3)
    ends = params.Ts * np.arange(1, 4)
    cum = out.cumulative(ends)
    assert np.allclose(cum * out.M, np.cumsum(out.hits, axis=1))
    fine = out.cumulative(np.linspace(0, 0.3, 50))
    assert np.all(np.diff(fine, axis=1) >= 0)
    assert fine[0, 0] == 0


def test_tiny_escape_radius_releases_everything(siso):
    p = PhysicalParams(D=50.0, dt=1e-4, Ts=0.1, d_L=1.0, seed=1)
    out = simulate_emission(siso, p, 0, 2000, 1)
    assert out.escaped > 0.99 * out.M
    assert set(np.unique(out.status)) <= {ABSORBED, ESCAPED, EXPIRED}


def test_long_horizon_leaves_few_wanderers(siso, params):
    p = params.with_updates(d_L=15.0)
    out = simulate_emission(siso, p, 0, 2000, 20)
    assert out.expired < 0.05 * out.M
    assert out.escaped > 0


def test_far_field_stride_matches_fixed_step(topo_2x1):
    p = PhysicalParams(D=50.0, dt=1e-4, Ts=0.1, seed=11)
    fast = estimate_hit_probabilities(topo_2x1, p, 1, 40000, 3, far_field=True)
    slow = estimate_hit_probabilities(topo_2x1, p.with_updates(seed=12), 1, 40000, 3, far_field=False)
    se = np.hypot(fast.stderr, slow.stderr)
    z = (fast.p_hat - slow.p_hat) / se
    assert np.all(np.abs(z) < 4), z


def test_engine_matches_first_passage_law(siso):
    # fine step so the discrete membership check is within a fraction of one SE
    p = PhysicalParams(D=50.0, dt=1e-5, Ts=0.1, seed=5)
    hp = estimate_hit_probabilities(siso, p, 0, 40000, 2)
    geom = LinkGeometry(4.0, 2.0, 50.0)
    ref = np.array([slot_probability(k, p.Ts, geom) for k in (1, 2)])
    z = (hp.p_hat[0] - ref) / hp.stderr[0]
    assert np.all(np.abs(z) < 4), z


def test_stderr_is_binomial(siso, params):
    hp = estimate_hit_probabilities(siso, params, 0, 2000, 1)
    p = hp.p_hat[0, 0]
    assert hp.stderr[0, 0] == pytest.approx(math.sqrt(p * (1 - p) / 2000))


def test_zero_molecules(siso, params):
    out = simulate_emission(siso, params, 0, 0, 1)
    assert out.M == 0 and out.hits.sum() == 0
    assert np.all(out.cumulative([0.05]) == 0)
    with pytest.raises(ValueError):
        simulate_emission(siso, params, 0, 10, 0)


class TestStepDisplacement:
    def test_variance_per_axis(self):
        D, dt = 50.0, 1e-4
        x = step_displacement(MoleculeStream(3), D, dt, n=200_000)
        var = x.var(axis=0)
        assert np.allclose(var, 2 * D * dt, rtol=0.02)
        assert np.allclose(x.mean(axis=0), 0, atol=4 * math.sqrt(2 * D * dt / 200_000))
        c = np.corrcoef(x.T)
        assert np.all(np.abs(c[np.triu_indices(3, 1)]) < 0.01)

    def test_gaussian_shape(self):
        x = step_displacement(MoleculeStream(4), 1.0, 0.5, n=50_000).ravel()
        assert stats.kstest(x, "norm").pvalue > 1e-3

    def test_zero_diffusion_gives_zero_step(self):
        assert np.all(step_displacement(MoleculeStream(0), 0.0, 1e-4) == 0)

    def test_streams_are_keyed(self):
        a = MoleculeStream(1, 0, 5).normals(8)
        b = MoleculeStream(1, 0, 5).normals(8)
        c = MoleculeStream(1, 0, 6).normals(8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
