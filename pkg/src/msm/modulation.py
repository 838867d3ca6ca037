"""Spatial-modulation mapping, symbol statistics and the molecule-budget optimizer.

A symbol is stored as the integer ``(tx << 1) | data_bit``. Bits are read
MSB-first: the leading one (2x1, 2x2) or two (4x4) bits select the
transmitter and the final bit selects ``L0`` or ``L1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import Infeasible, InvalidCount, LengthMismatch
from .topology import PhysicalParams, Topology, normalize_scheme

_N_TX = {"siso": 1, "2x1": 2, "2x2": 2, "4x4": 4}


def n_transmitters(scheme: str) -> int:
    return _N_TX[normalize_scheme(scheme)]


def spatial_bits(scheme: str) -> int:
    return {1: 0, 2: 1, 4: 2}[n_transmitters(scheme)]


def bits_per_symbol(scheme: str) -> int:
    """Bits carried per slot by MSM on ``scheme`` (1 for SISO BCSK)."""
    return spatial_bits(scheme) + 1


@dataclass(frozen=True)
class MoleculeBudget:
    L0: int
    L1: int

    def __post_init__(self):
        if self.L0 < 1 or self.L1 < 1:
            raise InvalidCount("both L0 and L1 must be at least one molecule")

    @property
    def L_total(self) -> int:
        return self.L0 + self.L1

    def level(self, bit):
        return np.where(np.asarray(bit) == 1, self.L1, self.L0)


@dataclass(frozen=True)
class SymbolFrame:
    slot: int
    transmitter: int     # 0-based; the only active one in this slot
    count: int
    bits: tuple[int, ...]


def activation_vector(frame: SymbolFrame, n_tx: int) -> np.ndarray:
    a = np.zeros(n_tx, dtype=int)
    a[frame.transmitter] = 1
    return a


def _as_bits(bits) -> np.ndarray:
    if isinstance(bits, str):
        arr = np.array([int(c) for c in bits if not c.isspace()], dtype=np.int8)
    else:
        arr = np.asarray(bits, dtype=np.int8).ravel()
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("bits must be 0/1")
    return arr


def msm_symbols(bits, scheme: str) -> tuple[np.ndarray, np.ndarray]:
    """Split a bit stream into (transmitter index, data bit) arrays."""
    arr = _as_bits(bits)
    bps = bits_per_symbol(scheme)
    if arr.size % bps:
        raise LengthMismatch(f"{arr.size} bits do not tile into {bps}-bit blocks")
    blocks = arr.reshape(-1, bps).astype(np.int64)
    tx = np.zeros(blocks.shape[0], dtype=np.int64)
    for col in range(bps - 1):
        tx = (tx << 1) | blocks[:, col]
    return tx, blocks[:, -1]


def msm_bits(tx, data, scheme: str) -> np.ndarray:
    """Inverse of :func:`msm_symbols`."""
    tx = np.asarray(tx, dtype=np.int64)
    data = np.asarray(data, dtype=np.int64)
    nsp = spatial_bits(scheme)
    cols = [(tx >> (nsp - 1 - c)) & 1 for c in range(nsp)] + [data]
    return np.stack(cols, axis=-1).reshape(-1).astype(np.int8)


def msm_encode(bits, scheme: str, budget: MoleculeBudget) -> list[SymbolFrame]:
    """Map bits onto one frame per slot.

    >>> msm_encode("01", "2x1", MoleculeBudget(300, 700))[0].count
    700
    """
    tx, data = msm_symbols(bits, scheme)
    arr = _as_bits(bits).reshape(len(tx), -1) if len(tx) else np.zeros((0, 0), np.int8)
    return [SymbolFrame(k, int(t), int(budget.level(b)), tuple(int(v) for v in arr[k]))
            for k, (t, b) in enumerate(zip(tx, data))]


def msm_decode(frames: Sequence[SymbolFrame], scheme: str, budget: MoleculeBudget) -> np.ndarray:
    tx = [f.transmitter for f in frames]
    data = [1 if f.count == budget.L1 and budget.L1 != budget.L0 else 0 for f in frames]
    return msm_bits(tx, data, scheme)


def mapping_table(scheme: str) -> list[tuple[str, int, int]]:
    """Every bit block with its (transmitter, data bit)."""
    bps = bits_per_symbol(scheme)
    rows = []
    for v in range(2 ** bps):
        block = format(v, f"0{bps}b")
        tx, data = msm_symbols(block, scheme)
        rows.append((block, int(tx[0]), int(data[0])))
    return rows


# --- symbol statistics ------------------------------------------------------

@dataclass(frozen=True)
class SymbolStatistics:
    """Means and variances indexed by (previous, current) symbol.

    Entry ``n_sym * current + previous`` holds the pair ``(S_p, S_c)``; the
    current symbol is the slow index, as in the target vectors.
    """

    means: np.ndarray
    variances: np.ndarray
    n_symbols: int

    def pair(self, previous: int, current: int) -> tuple[float, float]:
        i = self.n_symbols * current + previous
        return float(self.means[i]), float(self.variances[i])

    def by_current(self) -> tuple[np.ndarray, np.ndarray]:
        """Mixture moments per current symbol, averaging over equiprobable predecessors."""
        mu = self.means.reshape(self.n_symbols, self.n_symbols)
        var = self.variances.reshape(self.n_symbols, self.n_symbols)
        m = mu.mean(axis=1)
        v = var.mean(axis=1) + mu.var(axis=1)
        return m, v


def single_receiver_statistics(p1, p2, L0: float, L1: float) -> SymbolStatistics:
    """Received-count moments on a single receiver fed by ``len(p1)`` transmitters.

    ``p1[j]`` and ``p2[j]`` are the current-slot and next-slot absorption
    probabilities for transmitter ``j``.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    n_sym = 2 * p1.size
    sym = np.arange(n_sym)
    tx, bit = sym >> 1, sym & 1
    level = np.where(bit == 1, L1, L0).astype(float)
    cur_m = level * p1[tx]
    cur_v = level * p1[tx] * (1 - p1[tx])
    isi_m = level * p2[tx]
    isi_v = level * p2[tx] * (1 - p2[tx])
    means = (cur_m[:, None] + isi_m[None, :]).ravel()
    variances = (cur_v[:, None] + isi_v[None, :]).ravel()
    return SymbolStatistics(means, variances, n_sym)


def link_probabilities_2x1(topology: Topology, params: PhysicalParams, coeffs=None):
    """Slot-1 and slot-2 probabilities from each transmitter to the single receiver."""
    from .channel import mean_channel_matrix

    p1 = mean_channel_matrix(topology, coeffs, 1, params).matrix[0]
    p2 = mean_channel_matrix(topology, coeffs, 2, params).matrix[0]
    return p1, p2


def symbol_statistics_2x1(topology: Topology, budget: MoleculeBudget, params: PhysicalParams,
                          coeffs=None) -> SymbolStatistics:
    p1, p2 = link_probabilities_2x1(topology, params, coeffs)
    return single_receiver_statistics(p1, p2, budget.L0, budget.L1)


# --- budget optimizer -------------------------------------------------------

StatsBuilder = Callable[[float, float], tuple[np.ndarray, np.ndarray]]


def _affine_in_l0(stats_builder: StatsBuilder, L_total: float):
    m0, v0 = (np.asarray(a, dtype=float) for a in stats_builder(0.0, float(L_total)))
    m1, v1 = (np.asarray(a, dtype=float) for a in stats_builder(float(L_total), 0.0))
    slope = np.concatenate([m1 - m0, v1 - v0]) / L_total
    icpt = np.concatenate([m0, v0])
    return slope, icpt


def budget_objective(stats_builder: StatsBuilder, L0: float, L_total: float, b, c) -> float:
    mu, var = stats_builder(float(L0), float(L_total - L0))
    return float(np.sum((np.asarray(mu) - b) ** 2) + np.sum((np.asarray(var) - c) ** 2))


def optimize_molecule_budget(stats_builder: StatsBuilder, L_total: int, b, c) -> MoleculeBudget:
    """Minimise ``|mu - b|^2 + |var - c|^2`` subject to ``L0 + L1 = L_total``.

    ``stats_builder(L0, L1)`` returns the mean and variance vectors; both are
    affine in the counts, so on the constraint line the objective is a 1-D
    convex quadratic in ``L0``. Its vertex is rounded half-up and clipped to
    ``[1, L_total - 1]``.
    """
    L_total = int(L_total)
    if L_total < 2:
        raise Infeasible("L_total must be at least 2")
    slope, icpt = _affine_in_l0(stats_builder, L_total)
    target = np.concatenate([np.asarray(b, dtype=float), np.asarray(c, dtype=float)])
    if slope.shape != target.shape:
        raise LengthMismatch("target vectors do not match the statistics vectors")
    denom = float(slope @ slope)
    x = L_total / 2 if denom == 0 else float(slope @ (target - icpt)) / denom
    L0 = int(np.floor(x + 0.5))
    L0 = min(max(L0, 1), L_total - 1)
    return MoleculeBudget(L0, L_total - L0)


def brute_force_budget(stats_builder: StatsBuilder, L_total: int, b, c) -> tuple[MoleculeBudget, float]:
    """Exhaustive search over every integer split; the optimizer's oracle."""
    L0s = np.arange(1, int(L_total))
    slope, icpt = _affine_in_l0(stats_builder, L_total)
    target = np.concatenate([np.asarray(b, dtype=float), np.asarray(c, dtype=float)])
    # residual is affine in L0, so evaluate all splits in one shot
    res = icpt[None, :] + L0s[:, None] * slope[None, :] - target[None, :]
    obj = np.einsum("ij,ij->i", res, res)
    k = int(np.argmin(obj))
    return MoleculeBudget(int(L0s[k]), int(L_total - L0s[k])), float(obj[k])


TARGET_SPAN = 0.2


def default_targets_2x1(p1, p2, L_total: float, span: float = TARGET_SPAN
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced target ladder for the four current symbols.

    Symbols are ranked (far Tx, bit 0) < (near Tx, bit 0) < (far Tx, bit 1) <
    (near Tx, bit 1). At the even split ``L0 = L1 = L_total / 2`` the
    ISI-averaged means span ``[m_lo, m_hi]``; the mean targets are spaced
    uniformly over ``[(1 - span) m_lo, (1 + span) m_hi]`` in rank order, and
    the variance targets likewise. Each target repeats for the four
    predecessors.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if not 0 < span < 1:
        raise ValueError("span must lie in (0, 1)")
    m, v = single_receiver_statistics(p1, p2, L_total / 2, L_total / 2).by_current()
    near = int(np.argmax(p1))
    far = 1 - near
    rank = np.empty(4)
    rank[(far << 1) | 0] = 0
    rank[(near << 1) | 0] = 1
    rank[(far << 1) | 1] = 2
    rank[(near << 1) | 1] = 3
    lo, hi = (1 - span) * m.min(), (1 + span) * m.max()
    vlo, vhi = (1 - span) * v.min(), (1 + span) * v.max()
    b = np.repeat(lo + rank / 3 * (hi - lo), 4)
    c = np.repeat(vlo + rank / 3 * (vhi - vlo), 4)
    return b, c


def optimize_budget_2x1(p1, p2, L_total: int, targets=None, span: float = TARGET_SPAN
                        ) -> MoleculeBudget:
    b, c = default_targets_2x1(p1, p2, L_total, span) if targets is None else targets

    def builder(L0, L1):
        s = single_receiver_statistics(p1, p2, L0, L1)
        return s.means, s.variances

    return optimize_molecule_budget(builder, L_total, b, c)


# --- baselines --------------------------------------------------------------

def qcsk_levels(L_avg: float) -> np.ndarray:
    """Four uniformly spaced concentration levels whose average is ``L_avg``."""
    if L_avg < 10:
        raise InvalidCount("L_avg must be at least 10")
    step = 0.4 * L_avg
    return np.rint(step * np.arange(1, 5)).astype(np.int64)


def pairwise_bcsk_encode(bits, n_tx: int, L1_pair: int) -> np.ndarray:
    """(slots, n_tx) schedule: each transmitter sends on-off keying to its paired receiver."""
    arr = _as_bits(bits)
    if arr.size % n_tx:
        raise LengthMismatch(f"{arr.size} bits do not tile across {n_tx} transmitters")
    return arr.reshape(-1, n_tx).astype(np.int64) * int(L1_pair)
