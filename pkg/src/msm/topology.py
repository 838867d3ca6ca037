"""Geometries and physical parameters for the supported MIMO layouts.

Units are micrometres and seconds throughout. Transmitters sit on the plane
``x = 0``; every receiver centre sits on the plane ``x = d1 + Rr`` directly
opposite its paired transmitter, so the surface distance of a paired link is
``d1``.

For the 2x1 layout ``h`` is the transmitter spacing. For 2x2 and 4x4 the
layouts are cuboids and ``h`` (y axis) and ``w`` (z axis) are the
surface-to-surface gaps between adjacent receivers; transmitters are offset by
the same centre spacing ``gap + 2 Rr``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGeometry

SCHEMES = ("siso", "2x1", "2x2", "4x4")

#: default escape radius as a multiple of the largest Tx-Rx centre distance
ESCAPE_FACTOR = 10.0


def normalize_scheme(scheme: str) -> str:
    s = str(scheme).strip().lower().replace("×", "x")
    if s in ("1x1", "siso"):
        return "siso"
    if s not in SCHEMES:
        raise InvalidGeometry(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return s


@dataclass(frozen=True)
class PhysicalParams:
    """Diffusion constant, step, slot length, escape limit and master seed."""

    D: float = 50.0
    dt: float = 1e-4
    Ts: float = 0.1
    d_L: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not (self.D > 0 and self.dt > 0 and self.Ts > 0):
            raise InvalidGeometry("D, dt and Ts must be positive")
        ratio = self.Ts / self.dt
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise InvalidGeometry(f"Ts={self.Ts} is not an integer multiple of dt={self.dt}")
        if self.d_L is not None and self.d_L <= 0:
            raise InvalidGeometry("d_L must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidGeometry("seed must fit in 64 bits")

    @property
    def steps_per_slot(self) -> int:
        return int(round(self.Ts / self.dt))

    def escape_limit(self, topology: "Topology") -> float:
        if self.d_L is not None:
            return float(self.d_L)
        return ESCAPE_FACTOR * float(topology.center_distances().max())

    def with_updates(self, **kw) -> "PhysicalParams":
        d = dict(D=self.D, dt=self.dt, Ts=self.Ts, d_L=self.d_L, seed=self.seed)
        d.update(kw)
        return PhysicalParams(**d)


@dataclass(frozen=True)
class Topology:
    transmitters: np.ndarray
    centers: np.ndarray
    radii: np.ndarray
    scheme: str = "siso"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        tx = np.atleast_2d(np.asarray(self.transmitters, dtype=float))
        rx = np.atleast_2d(np.asarray(self.centers, dtype=float))
        rr = np.broadcast_to(np.asarray(self.radii, dtype=float), (rx.shape[0],)).copy()
        if tx.shape[1] != 3 or rx.shape[1] != 3:
            raise InvalidGeometry("points must be 3-D")
        if np.any(rr <= 0):
            raise InvalidGeometry("receiver radius must be positive")
        for a in (tx, rx, rr):
            a.setflags(write=False)
        object.__setattr__(self, "transmitters", tx)
        object.__setattr__(self, "centers", rx)
        object.__setattr__(self, "radii", rr)
        object.__setattr__(self, "scheme", normalize_scheme(self.scheme))
        self._validate()

    def _validate(self):
        n = len(self.radii)
        for i in range(n):
            for k in range(i + 1, n):
                gap = np.linalg.norm(self.centers[i] - self.centers[k])
                if gap <= self.radii[i] + self.radii[k]:
                    raise InvalidGeometry(f"receivers {i} and {k} overlap")
        # a transmitter on a receiver surface is allowed; inside is not
        inside = self.center_distances() < self.radii[:, None] * (1 - 1e-12)
        if inside.any():
            i, j = np.argwhere(inside)[0]
            raise InvalidGeometry(f"transmitter {j} lies inside receiver {i}")

    @property
    def n_tx(self) -> int:
        return self.transmitters.shape[0]

    @property
    def n_rx(self) -> int:
        return self.centers.shape[0]

    @property
    def Rr(self) -> float:
        return float(self.radii[0])

    def center_distances(self) -> np.ndarray:
        """(n_rx, n_tx) distances from each transmitter to each receiver centre."""
        diff = self.centers[:, None, :] - self.transmitters[None, :, :]
        return np.linalg.norm(diff, axis=-1)

    def surface_distances(self) -> np.ndarray:
        """(n_rx, n_tx) transmitter-to-surface distances ``d_ij``."""
        return self.center_distances() - self.radii[:, None]

    def distance_classes(self) -> np.ndarray:
        """(n_rx, n_tx) integer labels, 1-based.

        Symmetric layouts label a pair by the XOR of its 0-based indices, which
        reproduces the block pattern of the 2x2 and 4x4 mean channel matrices.
        Non-symmetric layouts give each transmitter its own class.
        """
        i = np.arange(self.n_rx)[:, None]
        j = np.arange(self.n_tx)[None, :]
        if self.scheme in ("2x2", "4x4"):
            return (i ^ j) + 1
        return np.broadcast_to(j + 1, (self.n_rx, self.n_tx)).copy()

    def class_representatives(self) -> dict[int, tuple[int, int]]:
        """Map each class to the (receiver, transmitter) pair with smallest indices."""
        reps: dict[int, tuple[int, int]] = {}
        cls = self.distance_classes()
        for j in range(self.n_tx):
            for i in range(self.n_rx):
                reps.setdefault(int(cls[i, j]), (i, j))
        return dict(sorted(reps.items()))

    def class_distance(self, cls: int) -> float:
        i, j = self.class_representatives()[cls]
        return float(self.surface_distances()[i, j])


def make_topology(scheme: str, d1: float, h: float | None = None, w: float | None = None,
                  Rr: float = 2.0) -> Topology:
    """Build one of the four canonical layouts.

    Examples
    --------
    >>> t = make_topology("2x1", d1=4, h=4, Rr=2)
    >>> round(float(t.surface_distances()[0, 1]), 4)
    5.2111
    """
    scheme = normalize_scheme(scheme)
    if not d1 > 0:
        raise InvalidGeometry("d1 must be positive")
    if not Rr > 0:
        raise InvalidGeometry("Rr must be positive")
    if scheme != "siso" and h is None:
        raise InvalidGeometry(f"scheme {scheme} requires h")
    if scheme == "4x4" and w is None:
        raise InvalidGeometry("scheme 4x4 requires w")
    if h is not None and h < 0 or w is not None and w < 0:
        raise InvalidGeometry("h and w must be non-negative")
    x_rx = d1 + Rr
    if scheme == "siso":
        tx = [[0.0, 0.0, 0.0]]
        rx = [[x_rx, 0.0, 0.0]]
    elif scheme == "2x1":
        tx = [[0.0, 0.0, 0.0], [0.0, float(h), 0.0]]
        rx = [[x_rx, 0.0, 0.0]]
    elif scheme == "2x2":
        s = float(h) + 2 * Rr
        tx = [[0.0, 0.0, 0.0], [0.0, s, 0.0]]
        rx = [[x_rx, 0.0, 0.0], [x_rx, s, 0.0]]
    else:
        sy = float(h) + 2 * Rr
        sz = float(w) + 2 * Rr
        # index bit 0 -> y offset, bit 1 -> z offset
        offsets = [(0.0, 0.0), (sy, 0.0), (0.0, sz), (sy, sz)]
        tx = [[0.0, y, z] for y, z in offsets]
        rx = [[x_rx, y, z] for y, z in offsets]
    params = {"d1": float(d1), "h": None if h is None else float(h),
              "w": None if w is None else float(w), "Rr": float(Rr)}
    return Topology(np.array(tx), np.array(rx), Rr, scheme, params)


def d2_2x1(d1: float, h: float, Rr: float) -> float:
    """Surface distance from the offset transmitter of the 2x1 layout."""
    return math.sqrt(h * h + (d1 + Rr) ** 2) - Rr
