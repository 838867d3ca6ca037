"""Particle random-walk engine with absorbing spherical receivers.

Every molecule owns an independent xoshiro256** stream keyed by
``(seed, emitter, molecule index)``, so an outcome is bit-identical no matter
how the population is split across workers, and two runs that share a seed
reuse the same paths (common random numbers).

Absorption is the discrete membership test ``|x - c| < Rr`` evaluated after
each step of length ``dt``. Far from every receiver the walker may take a
single Gaussian step that stands in for ``2**n`` consecutive ``dt`` steps; this
is only done when the gap to the nearest receiver surface exceeds
``FAR_FIELD_SAFETY`` standard deviations of the combined step, so the chance
that one of the skipped fine positions would have been inside a receiver is
below 1e-15. Near a receiver the walk always advances by ``dt``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import NumbaWarning, njit, prange, uint64

from .topology import PhysicalParams, Topology

EXPIRED, ABSORBED, ESCAPED = 0, 1, 2

FAR_FIELD_SAFETY = 14.0
MAX_STRIDE_LOG2 = 14

_M64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix(x: int) -> int:
    x = (x + _GOLDEN) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def stream_key(seed: int, emitter: int) -> int:
    """64-bit key shared by all molecules of one emission."""
    return _splitmix(_splitmix(int(seed) & _M64) ^ (int(emitter) & _M64))


# --- jitted generator -------------------------------------------------------

@njit(inline="always")
def _rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@njit(inline="always")
def _mix(z):
    z = (z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB)
    return z ^ (z >> uint64(31))


@njit(cache=True)
def _seed_state(key, molecule, state):
    z = _mix(key ^ (uint64(molecule) * uint64(0xD1B54A32D192ED03)))
    for i in range(4):
        z = z + uint64(0x9E3779B97F4A7C15)
        state[i] = _mix(z)


@njit(inline="always")
def _next_unit(state):
    # uniform on (-1, 1)
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    r = _rotl(s1 * uint64(5), 7) * uint64(9)
    t = s1 << uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return (r >> uint64(11)) * (2.0 / 9007199254740992.0) - 1.0


@njit(inline="always")
def _normal_pair(state):
    while True:
        u = _next_unit(state)
        v = _next_unit(state)
        q = u * u + v * v
        if 0.0 < q < 1.0:
            f = math.sqrt(-2.0 * math.log(q) / q)
            return u * f, v * f


@njit(cache=True)
def _fill_normals(state, spare, out):
    # spare[0] holds a cached deviate, spare[1] flags it
    for i in range(out.shape[0]):
        if spare[1] != 0.0:
            out[i] = spare[0]
            spare[1] = 0.0
        else:
            a, b = _normal_pair(state)
            out[i] = a
            spare[0] = b
            spare[1] = 1.0


@njit(parallel=True, cache=True)
def _walk(key, m0, m1, start, centers, r2, radii, dl2, sigma, n_steps, far_field,
          status, receiver, step_out):
    n_rx = centers.shape[0]
    for idx in prange(m1 - m0):
        state = np.empty(4, dtype=np.uint64)
        _seed_state(key, m0 + idx, state)
        have = False
        spare = 0.0
        x, y, z = start[0], start[1], start[2]
        st = EXPIRED
        hit = -1
        t = 0
        # emission point check
        for r in range(n_rx):
            dx = x - centers[r, 0]
            dy = y - centers[r, 1]
            dz = z - centers[r, 2]
            if dx * dx + dy * dy + dz * dz < r2[r]:
                st = ABSORBED
                hit = r
                break
        while st == EXPIRED and t < n_steps:
            stride = 1
            if far_field:
                gap = 1e300
                for r in range(n_rx):
                    dx = x - centers[r, 0]
                    dy = y - centers[r, 1]
                    dz = z - centers[r, 2]
                    g = math.sqrt(dx * dx + dy * dy + dz * dz) - radii[r]
                    if g < gap:
                        gap = g
                lim = gap / (FAR_FIELD_SAFETY * sigma)
                lim2 = lim * lim
                k = 0
                while k < MAX_STRIDE_LOG2 and 2 * stride <= lim2 and t + 2 * stride <= n_steps:
                    stride *= 2
                    k += 1
            s = sigma * math.sqrt(stride)
            if have:
                gx = spare
                have = False
                gy, gz = _normal_pair(state)
            else:
                gx, gy = _normal_pair(state)
                gz, spare = _normal_pair(state)
                have = True
            x += s * gx
            y += s * gy
            z += s * gz
            t += stride
            for r in range(n_rx):
                dx = x - centers[r, 0]
                dy = y - centers[r, 1]
                dz = z - centers[r, 2]
                if dx * dx + dy * dy + dz * dz < r2[r]:
                    st = ABSORBED
                    hit = r
                    break
            if st == EXPIRED:
                dx = x - start[0]
                dy = y - start[1]
                dz = z - start[2]
                if dx * dx + dy * dy + dz * dz > dl2:
                    st = ESCAPED
        status[idx] = st
        receiver[idx] = hit
        step_out[idx] = t


# --- Python surface ---------------------------------------------------------

class MoleculeStream:
    """The per-molecule generator used inside the engine, exposed for testing."""

    def __init__(self, seed: int, emitter: int = 0, molecule: int = 0):
        self._state = np.empty(4, dtype=np.uint64)
        _seed_state(np.uint64(stream_key(seed, emitter)), molecule, self._state)
        self._spare = np.zeros(2)

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n)
        _fill_normals(self._state, self._spare, out)
        return out


def step_displacement(stream: MoleculeStream, D: float, dt: float, n: int | None = None) -> np.ndarray:
    """Draw one (or ``n``) 3-D displacement(s) with per-axis variance ``2 D dt``."""
    count = 1 if n is None else n
    sd = math.sqrt(2.0 * D * dt) if D > 0 and dt > 0 else 0.0
    out = stream.normals(3 * count).reshape(count, 3) * sd
    return out[0] if n is None else out


@dataclass(frozen=True)
class WalkOutcome:
    """Terminal status of every emitted molecule.

    ``step`` is the index of the ``dt`` step at which the molecule was absorbed
    or escaped (``n_steps`` for molecules still wandering at the end).
    """

    status: np.ndarray
    receiver: np.ndarray
    step: np.ndarray
    n_receivers: int
    num_slots: int
    steps_per_slot: int
    dt: float
    seed: int
    emitter: int

    @property
    def M(self) -> int:
        return int(self.status.size)

    @property
    def absorbed(self) -> int:
        return int(np.count_nonzero(self.status == ABSORBED))

    @property
    def escaped(self) -> int:
        return int(np.count_nonzero(self.status == ESCAPED))

    @property
    def expired(self) -> int:
        return int(np.count_nonzero(self.status == EXPIRED))

    def slot_of(self) -> np.ndarray:
        """1-based slot index of each absorption (0 where not absorbed)."""
        slot = (self.step - 1) // self.steps_per_slot + 1
        return np.where(self.status == ABSORBED, np.maximum(slot, 1), 0)

    @property
    def hits(self) -> np.ndarray:
        """(n_receivers, num_slots) absorption counts ``N_k^{Rx_i}``."""
        out = np.zeros((self.n_receivers, self.num_slots), dtype=np.int64)
        mask = self.status == ABSORBED
        np.add.at(out, (self.receiver[mask], self.slot_of()[mask] - 1), 1)
        return out

    def cumulative(self, times: np.ndarray) -> np.ndarray:
        """(n_receivers, len(times)) fraction of molecules absorbed by each time."""
        times = np.asarray(times, dtype=float)
        out = np.zeros((self.n_receivers, times.size))
        if self.M == 0:
            return out
        bound = np.floor(times / self.dt + 1e-9)
        for r in range(self.n_receivers):
            steps = np.sort(self.step[(self.status == ABSORBED) & (self.receiver == r)])
            out[r] = np.searchsorted(steps, bound, side="right") / self.M
        return out


def simulate_emission(topology: Topology, params: PhysicalParams, emitter: int, M: int,
                      num_slots: int, *, far_field: bool = True) -> WalkOutcome:
    """Release ``M`` molecules from one transmitter at t=0 and follow them for
    ``num_slots`` slots."""
    if num_slots < 1:
        raise ValueError("num_slots must be >= 1")
    M = int(M)
    n_steps = params.steps_per_slot * int(num_slots)
    status = np.zeros(max(M, 0), dtype=np.int8)
    receiver = np.full(max(M, 0), -1, dtype=np.int16)
    step = np.zeros(max(M, 0), dtype=np.int64)
    if M > 0:
        dl = params.escape_limit(topology)
        with warnings.catch_warnings():
            # numba complains once about an old TBB before falling back to another layer
            warnings.simplefilter("ignore", NumbaWarning)
            _walk(np.uint64(stream_key(params.seed, emitter)), 0, M,
                  np.ascontiguousarray(topology.transmitters[emitter]),
                  np.ascontiguousarray(topology.centers), topology.radii ** 2, topology.radii,
                  dl * dl, math.sqrt(2.0 * params.D * params.dt), n_steps, bool(far_field),
                  status, receiver, step)
    _check_disjoint(topology, status, receiver)
    return WalkOutcome(status, receiver, step, topology.n_rx, int(num_slots),
                       params.steps_per_slot, params.dt, int(params.seed), int(emitter))


def _check_disjoint(topology: Topology, status, receiver):
    # the kernel takes the first sphere hit; disjointness makes that unambiguous
    assert np.all((status != ABSORBED) | ((receiver >= 0) & (receiver < topology.n_rx)))


@dataclass(frozen=True)
class HitProbabilities:
    p_hat: np.ndarray   # (n_rx, num_slots)
    stderr: np.ndarray
    M: int
    seed: int
    emitter: int


def estimate_hit_probabilities(topology: Topology, params: PhysicalParams, emitter: int, M: int,
                               num_slots: int, *, far_field: bool = True) -> HitProbabilities:
    out = simulate_emission(topology, params, emitter, M, num_slots, far_field=far_field)
    p = out.hits / max(M, 1)
    se = np.sqrt(p * (1 - p) / max(M, 1))
    return HitProbabilities(p, se, int(M), int(params.seed), int(emitter))
