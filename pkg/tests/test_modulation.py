import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msm.errors import Infeasible, InvalidCount, LengthMismatch
from msm.harness import ParticleChannel, particle_law
from msm.modulation import (MoleculeBudget, activation_vector, bits_per_symbol, brute_force_budget,
                            budget_objective, default_targets_2x1, single_receiver_statistics,
                            link_probabilities_2x1, mapping_table, msm_bits, msm_decode, msm_encode,
                            msm_symbols, optimize_budget_2x1, optimize_molecule_budget,
                            pairwise_bcsk_encode, qcsk_levels, symbol_statistics_2x1)
from msm.topology import PhysicalParams

BUDGET = MoleculeBudget(300, 700)


class TestMapping:
    def test_2x1_examples(self):
        f = msm_encode("01", "2x1", BUDGET)[0]
        assert (f.transmitter, f.count) == (0, 700)
        f = msm_encode("10", "2x1", BUDGET)[0]
        assert (f.transmitter, f.count) == (1, 300)

    def test_4x4_example(self):
        f = msm_encode("110", "4x4", BUDGET)[0]
        assert (f.transmitter, f.count, f.bits) == (3, 300, (1, 1, 0))
        assert activation_vector(f, 4).tolist() == [0, 0, 0, 1]

    @pytest.mark.parametrize("scheme", ["2x1", "2x2", "4x4"])
    def test_table_is_bijective(self, scheme):
        table = mapping_table(scheme)
        n = 2 ** bits_per_symbol(scheme)
        assert len(table) == n
        assert len({(tx, b) for _, tx, b in table}) == n
        for block, tx, b in table:
            frame = msm_encode(block, scheme, BUDGET)[0]
            assert frame.transmitter == tx and frame.count == BUDGET.level(b)
            assert "".join(map(str, msm_decode([frame], scheme, BUDGET))) == block

    @pytest.mark.parametrize("scheme", ["2x1", "2x2", "4x4"])
    def test_roundtrip_random_stream(self, scheme, rng):
        bits = rng.integers(0, 2, 300 * bits_per_symbol(scheme))
        frames = msm_encode(bits, scheme, BUDGET)
        assert np.array_equal(msm_decode(frames, scheme, BUDGET), bits)
        tx, data = msm_symbols(bits, scheme)
        assert np.array_equal(msm_bits(tx, data, scheme), bits)

    def test_untiled_stream_rejected(self):
        with pytest.raises(LengthMismatch):
            msm_encode("011", "2x1", BUDGET)
        with pytest.raises(ValueError):
            msm_symbols("0120", "2x1")

    def test_equal_levels_lose_the_data_bit(self):
        b = MoleculeBudget(500, 500)
        frames = msm_encode("0111", "2x1", b)
        assert [f.count for f in frames] == [500, 500]
        assert msm_decode(frames, "2x1", b).tolist() == [0, 0, 1, 0]

    def test_budget_requires_molecules(self):
        with pytest.raises(InvalidCount):
            MoleculeBudget(0, 10)
        assert BUDGET.L_total == 1000
        assert BUDGET.level([0, 1]).tolist() == [300, 700]


class TestSymbolStatistics:
    p1 = np.array([0.0686, 0.035])
    p2 = np.array([0.055, 0.04])

    def test_pair_indexing(self):
        s = single_receiver_statistics(self.p1, self.p2, 300, 700)
        # previous = (Tx2, bit 1) = 3, current = (Tx1, bit 0) = 0
        mu, var = s.pair(3, 0)
        assert mu == pytest.approx(300 * 0.0686 + 700 * 0.04)
        assert var == pytest.approx(300 * 0.0686 * (1 - 0.0686) + 700 * 0.04 * 0.96)

    def test_equal_levels_collapse(self):
        s = single_receiver_statistics(self.p1, self.p2, 500, 500)
        assert np.unique(np.round(s.means, 9)).size == 4

    def test_no_isi(self):
        s = single_receiver_statistics(self.p1, np.zeros(2), 300, 700)
        tx, bit = np.arange(4) >> 1, np.arange(4) & 1
        cur = np.where(bit, 700, 300) * self.p1[tx]
        assert np.allclose(s.means.reshape(4, 4), cur[:, None])

    def test_mixture_moments(self):
        s = single_receiver_statistics(self.p1, self.p2, 300, 700)
        m, v = s.by_current()
        mu = s.means.reshape(4, 4)
        assert np.allclose(m, mu.mean(axis=1))
        assert np.all(v > s.variances.reshape(4, 4).mean(axis=1))

    def test_matches_engine_frames(self, topo_2x1):
        # two-slot frames through the engine's per-molecule law
        p = PhysicalParams(D=50.0, dt=1e-5, Ts=0.1, seed=17)
        M = 50_000
        law = particle_law(topo_2x1, p, 1, M)
        ch = ParticleChannel(law, 1)
        budget = MoleculeBudget(300, 700)
        stats = symbol_statistics_2x1(topo_2x1, budget, p)
        rng = np.random.default_rng(4)
        n = 10_000
        prev, cur = rng.integers(0, 4, n), rng.integers(0, 4, n)
        X = np.zeros((n, 2, 2), dtype=np.int64)
        for slot, sym in ((0, prev), (1, cur)):
            X[np.arange(n), slot, sym >> 1] = np.where(sym & 1, 700, 300)
        y = np.array([ch.receive(x, rng)[1, 0] for x in X])
        for sp, sc in itertools.product(range(4), range(4)):
            sel = y[(prev == sp) & (cur == sc)]
            mu, var = stats.pair(sp, sc)
            # law estimated from M molecules adds its own spread to the comparison
            law_var = sum(L ** 2 * q * (1 - q) / M for L, q in (
                (budget.level(sc & 1), law[sc >> 1, 0]), (budget.level(sp & 1), law[sp >> 1, 1])))
            se = np.sqrt(var / sel.size + law_var)
            assert abs(sel.mean() - mu) < 3.5 * se, (sp, sc)
            assert abs(sel.var() - var) < 4 * var * np.sqrt(2 / sel.size) + 2 * np.sqrt(law_var) * mu


def quad_builder(p1, p2):
    def builder(L0, L1):
        s = single_receiver_statistics(p1, p2, L0, L1)
        return s.means, s.variances
    return builder


class TestOptimizer:
    @given(p1=st.tuples(st.floats(1e-3, 0.3), st.floats(1e-3, 0.3)),
           p2=st.tuples(st.floats(0, 0.2), st.floats(0, 0.2)),
           L_total=st.integers(2, 5000), seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_matches_exhaustive_search(self, p1, p2, L_total, seed):
        r = np.random.default_rng(seed)
        b = r.uniform(0, 0.3 * L_total, 16)
        c = r.uniform(0, 0.3 * L_total, 16)
        builder = quad_builder(p1, p2)
        opt = optimize_molecule_budget(builder, L_total, b, c)
        bf, bf_obj = brute_force_budget(builder, L_total, b, c)
        assert abs(opt.L0 - bf.L0) <= 1
        assert opt.L_total == L_total
        assert budget_objective(builder, opt.L0, L_total, b, c) <= bf_obj * (1 + 1e-9) + 1e-9

    def test_symmetric_targets_give_even_split(self):
        p1, p2 = np.array([0.07, 0.035]), np.array([0.055, 0.04])
        s = single_receiver_statistics(p1, p2, 600, 600)
        idx = np.arange(16)
        flip = 4 * ((idx // 4) ^ 1) + ((idx % 4) ^ 1)
        noise = np.random.default_rng(1).normal(0, 5, 16)
        b = s.means + noise + (s.means + noise)[flip]
        c = s.variances + noise + (s.variances + noise)[flip]
        assert optimize_molecule_budget(quad_builder(p1, p2), 1200, b, c) == MoleculeBudget(600, 600)

    def test_errors(self):
        builder = quad_builder([0.1, 0.05], [0.02, 0.01])
        with pytest.raises(Infeasible):
            optimize_molecule_budget(builder, 1, np.zeros(16), np.zeros(16))
        with pytest.raises(LengthMismatch):
            optimize_molecule_budget(builder, 100, np.zeros(4), np.zeros(4))

    def test_default_targets_form_ladder(self, topo_2x1, params):
        p1, p2 = link_probabilities_2x1(topo_2x1, params)
        b, c = default_targets_2x1(p1, p2, 2000)
        assert b.shape == c.shape == (16,)
        per_cur = b.reshape(4, 4)
        assert np.all(per_cur == per_cur[:, :1])
        # far/0 < near/0 < far/1 < near/1 with near = Tx1
        assert per_cur[2, 0] < per_cur[0, 0] < per_cur[3, 0] < per_cur[1, 0]
        with pytest.raises(ValueError):
            default_targets_2x1(p1, p2, 2000, span=1.5)

    def test_optimized_split_is_interior(self, topo_2x1, params):
        p1, p2 = link_probabilities_2x1(topo_2x1, params)
        bud = optimize_budget_2x1(p1, p2, 2000)
        assert 1 <= bud.L0 < bud.L1 <= 1999


class TestBaselines:
    def test_qcsk_levels(self):
        lv = qcsk_levels(1000)
        assert lv.tolist() == [400, 800, 1200, 1600]
        assert lv.mean() == 1000
        with pytest.raises(InvalidCount):
            qcsk_levels(5)

    def test_pairwise_schedule(self):
        assert pairwise_bcsk_encode("11", 2, 700).tolist() == [[700, 700]]
        assert pairwise_bcsk_encode("0000", 2, 700).tolist() == [[0, 0], [0, 0]]
        assert pairwise_bcsk_encode("0110", 4, 50).tolist() == [[0, 50, 50, 0]]
        with pytest.raises(LengthMismatch):
            pairwise_bcsk_encode("011", 2, 700)
