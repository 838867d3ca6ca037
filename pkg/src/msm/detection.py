"""Threshold detection, matched-filter transform and the MSM detectors.

Every decision statistic used here is a fixed linear combination ``w . y`` of
the receiver counts. Receiver counts are modelled as independent Gaussians, so
the statistic's mean and variance follow from ``sum(w_i mu_i)`` and
``sum(w_i^2 var_i)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import numerical_rank
from .errors import DegenerateDistributions, LengthMismatch, OverlapCollapse, SingularMatrix


@dataclass(frozen=True)
class GaussianComponent:
    mean: float
    var: float
    label: int = 0

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError(f"variance must be positive, got {self.var}")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * (np.log(2 * np.pi * self.var) + (x - self.mean) ** 2 / self.var)


def _log_ratio(g1: GaussianComponent, g2: GaussianComponent, x: float) -> float:
    return float(g1.logpdf(x) - g2.logpdf(x))


def gaussian_intersection(g1: GaussianComponent, g2: GaussianComponent) -> float:
    """Point where the two densities are equal.

    With unequal variances the crossing solves ``A x^2 + B x + C = 0`` where
    ``A = v1 - v2``, ``B = 2 (mu1 v2 - mu2 v1)`` and
    ``C = mu2^2 v1 - mu1^2 v2 - v1 v2 ln(v1 / v2)``. The root between the two
    means is returned when there is one, otherwise the positive root closest
    to the midpoint.

    Examples
    --------
    >>> gaussian_intersection(GaussianComponent(10, 4), GaussianComponent(20, 4))
    15.0
    """
    m1, v1, m2, v2 = g1.mean, g1.var, g2.mean, g2.var
    if m1 == m2 and v1 == v2:
        raise DegenerateDistributions("identical distributions have no unique crossing")
    mid = 0.5 * (m1 + m2)
    if math.isclose(v1, v2, rel_tol=1e-14, abs_tol=0.0):
        return mid
    A = v1 - v2
    B = 2.0 * (m1 * v2 - m2 * v1)
    C = m2 * m2 * v1 - m1 * m1 * v2 - v1 * v2 * math.log(v1 / v2)
    disc = B * B - 4 * A * C
    if disc < 0:
        raise DegenerateDistributions("densities do not cross")
    # numerically stable pair of roots
    q = -0.5 * (B + math.copysign(math.sqrt(disc), B))
    roots = [q / A] + ([C / q] if q != 0 else [])
    lo, hi = min(m1, m2), max(m1, m2)
    between = [r for r in roots if lo <= r <= hi]
    if between:
        x = between[0]
    else:
        pos = [r for r in roots if r > 0] or roots
        x = min(pos, key=lambda r: abs(r - mid))
    # one Newton polish on the log-density difference
    f = _log_ratio(g1, g2, x)
    df = -(x - m1) / v1 + (x - m2) / v2
    if df != 0 and math.isfinite(f):
        x -= f / df
    return float(x)


@dataclass(frozen=True)
class ThresholdSet:
    """Increasing thresholds plus one label per region.

    Region ``r`` is ``(t[r-1], t[r]]``; an observation exactly on a threshold
    therefore falls into the lower region.
    """

    thresholds: np.ndarray
    labels: tuple[int, ...]

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float).ravel()
        if len(self.labels) != t.size + 1:
            raise LengthMismatch("need exactly one more label than thresholds")
        if t.size and not np.all(np.diff(t) > 0):
            raise OverlapCollapse("thresholds must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))

    def region(self, x) -> np.ndarray:
        return np.searchsorted(self.thresholds, np.asarray(x, dtype=float), side="left")

    def classify(self, x) -> np.ndarray:
        return np.asarray(self.labels)[self.region(x)]

    def to_rows(self) -> list[list]:
        return [[k, repr(float(g)), self.labels[k], self.labels[k + 1]]
                for k, g in enumerate(self.thresholds)]


def build_thresholds(components: Sequence[GaussianComponent], tol: float = 1e-9) -> ThresholdSet:
    """Adjacent-pair intersections of the components sorted by mean."""
    if len(components) < 2:
        raise ValueError("need at least two components")
    comps = sorted(components, key=lambda g: g.mean)
    for a, b in zip(comps, comps[1:]):
        scale = max(abs(a.mean), abs(b.mean), 1.0)
        if b.mean - a.mean <= tol * scale:
            raise OverlapCollapse(f"components {a.label} and {b.label} have equal means")
    th = [gaussian_intersection(a, b) for a, b in zip(comps, comps[1:])]
    for k, (a, b) in enumerate(zip(comps, comps[1:])):
        # a crossing outside the means of a very unequal-variance pair falls back to the midpoint
        if not a.mean <= th[k] <= b.mean:
            th[k] = 0.5 * (a.mean + b.mean)
    return ThresholdSet(np.array(th), tuple(g.label for g in comps))


def merge_coincident(components: Sequence[GaussianComponent], tol: float = 1e-9
                     ) -> list[GaussianComponent]:
    """Collapse components whose means coincide into one, keeping the lowest label.

    Lets a sweep pass through degenerate budgets (``L0 == L1``) where the
    colliding symbols cannot be told apart anyway.
    """
    comps = sorted(components, key=lambda g: (g.mean, g.label))
    out: list[list[GaussianComponent]] = []
    for g in comps:
        if out:
            ref = out[-1][0]
            if g.mean - ref.mean <= tol * max(abs(ref.mean), abs(g.mean), 1.0):
                out[-1].append(g)
                continue
        out.append([g])
    merged = []
    for grp in out:
        m = float(np.mean([g.mean for g in grp]))
        v = float(np.mean([g.var + (g.mean - m) ** 2 for g in grp]))
        merged.append(GaussianComponent(m, v, min(g.label for g in grp)))
    return merged


def write_thresholds(path, sets: dict[str, ThresholdSet]):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector", "index", "gamma", "label_below", "label_above"])
        for name, ts in sets.items():
            for row in ts.to_rows():
                w.writerow([name] + row)
    return path


# --- matched filter ---------------------------------------------------------

@dataclass(frozen=True)
class MfDetectorCoefficients:
    """Mean channel matrix, its inverse and the scalar constants of its pattern.

    For a 2x2 layout ``K = 1 / (p1^2 - p2^2)``; for 4x4 ``c = (c11..c14)`` is the
    first row of ``det(H) * inv(H)``.
    """

    H: np.ndarray
    H_inv: np.ndarray
    K: float | None = None
    c: tuple[float, float, float, float] | None = None
    det: float | None = None

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def row_sum(self) -> float:
        return float(self.H[0].sum())


def mf_coefficients(H, tol: float = 1e-8) -> MfDetectorCoefficients:
    H = np.array(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise LengthMismatch("mean channel matrix must be square")
    if numerical_rank(H, tol) < H.shape[0]:
        raise SingularMatrix("mean channel matrix is rank deficient")
    H_inv = np.linalg.inv(H)
    K = c = det = None
    if H.shape == (2, 2):
        K = 1.0 / (H[0, 0] ** 2 - H[0, 1] ** 2)
    if H.shape == (4, 4):
        det = float(np.linalg.det(H))
        c = tuple(float(v) for v in H_inv[0] * det)
    H.setflags(write=False)
    H_inv.setflags(write=False)
    return MfDetectorCoefficients(H, H_inv, K, c, det)


def mf_transform(y, coeffs: MfDetectorCoefficients) -> np.ndarray:
    """Solve ``H yhat = y`` for one vector or a stack of row vectors."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != coeffs.dim:
        raise LengthMismatch(f"expected {coeffs.dim} receiver counts, got {y.shape[-1]}")
    if numerical_rank(coeffs.H) < coeffs.dim:
        raise SingularMatrix("mean channel matrix is rank deficient")
    return np.linalg.solve(coeffs.H, y.T).T


# --- ISI statistics ---------------------------------------------------------

@dataclass(frozen=True)
class IsiStatistics:
    """Per-receiver ISI mean and variance in the symmetric 2x2 and 4x4 layouts."""

    mean: float
    var: float
    n_tx: int


def isi_statistics(p2, L0: float, L1: float) -> IsiStatistics:
    """ISI moments from the slot-two class probabilities ``p2`` (one per class).

    Uses ``mu = (L0 + L1) sum(p2) / (2 n)`` and
    ``var = (L0 + L1) sum(p2 (1 - p2)) / (2 n)^2``, ``n = len(p2)``.
    """
    p2 = np.asarray(p2, dtype=float)
    n = p2.size
    mean = (L0 + L1) * p2.sum() / (2 * n)
    var = (L0 + L1) * (p2 * (1 - p2)).sum() / (2 * n) ** 2
    return IsiStatistics(float(mean), float(var), n)


# --- analytic detector-output statistics -----------------------------------

def _levels(L0, L1):
    return np.array([L0, L1], dtype=float)


def mf_output_moments_2x2(coeffs: MfDetectorCoefficients, L0, L1, isi: IsiStatistics):
    """Mean and variance of ``yhat(1)`` for the four (tx, bit) states.

    Returned arrays are indexed by symbol ``(tx << 1) | bit``.
    """
    p1, p2 = coeffs.H[0, 0], coeffs.H[0, 1]
    K = coeffs.K
    C1 = (p1 - p2) * isi.mean
    C2 = (p1 ** 2 + p2 ** 2) * isi.var
    L = _levels(L0, L1)
    mean = np.empty(4)
    var = np.empty(4)
    for b in (0, 1):
        mean[b] = K * ((p1 ** 2 - p2 ** 2) * L[b] + C1)
        mean[2 | b] = K * C1
        var[b] = K ** 2 * ((p1 ** 3 * (1 - p1) + p2 ** 3 * (1 - p2)) * L[b] + C2)
        var[2 | b] = K ** 2 * ((p1 ** 2 * p2 * (1 - p2) + p2 ** 2 * p1 * (1 - p1)) * L[b] + C2)
    return mean, var


def mf_output_moments_4x4(coeffs: MfDetectorCoefficients, L0, L1, isi: IsiStatistics):
    """(8, 4) means and variances of ``yhat(n)`` for every symbol, from ``c11..c14``."""
    c = np.array(coeffs.c)
    det = coeffs.det
    P = coeffs.H
    L = _levels(L0, L1)
    n = np.arange(4)
    mean = np.empty((8, 4))
    var = np.empty((8, 4))
    for s in range(8):
        tx, b = s >> 1, s & 1
        for out in range(4):
            # row `out` of det*inv(H) is c permuted by XOR with the output index
            w = c[n ^ out]
            p = P[:, tx]
            mean[s, out] = ((w * p).sum() * L[b] + c.sum() * isi.mean) / det
            var[s, out] = ((w ** 2 * p * (1 - p)).sum() * L[b] + (c ** 2).sum() * isi.var) / det ** 2
    return mean, var


def statistic_components(w, P1, P2, levels, *, isi: IsiStatistics | None = None,
                         isi_variance: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Moments of ``w . y`` for each current symbol ``(tx << 1) | bit``.

    ``P1`` and ``P2`` are (n_rx, n_tx) slot-one and slot-two probabilities and
    ``levels = (L0, L1)``. With ``isi`` given, the ISI on every receiver is the
    scalar mean/variance it carries; otherwise the exact mixture over the
    equiprobable previous symbol is used. ``isi_variance=False`` drops the ISI
    variance contribution.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))         # (n_stat, n_rx)
    P1 = np.atleast_2d(P1)
    P2 = np.atleast_2d(P2)
    L = np.asarray(levels, dtype=float)
    n_tx = P1.shape[1]
    n_sym = 2 * n_tx
    sym = np.arange(n_sym)
    tx, bit = sym >> 1, sym & 1
    cur_m = (L[bit][:, None] * P1.T[tx])                   # (n_sym, n_rx)
    cur_v = (L[bit][:, None] * (P1 * (1 - P1)).T[tx])
    if isi is not None:
        isi_m = np.full(P1.shape[0], isi.mean)
        isi_v = np.full(P1.shape[0], isi.var if isi_variance else 0.0)
        mean = (cur_m + isi_m) @ w.T
        var = (cur_v + isi_v) @ (w ** 2).T
        return mean.squeeze(-1) if mean.shape[-1] == 1 else mean, \
            var.squeeze(-1) if var.shape[-1] == 1 else var
    prev_m = (L[bit][:, None] * P2.T[tx])
    prev_v = (L[bit][:, None] * (P2 * (1 - P2)).T[tx])
    # pair (previous p, current c)
    m_pc = (cur_m[None, :, :] + prev_m[:, None, :]) @ w.T  # (prev, cur, n_stat)
    v_pc = (cur_v[None, :, :] + (prev_v[:, None, :] if isi_variance else 0.0)) @ (w ** 2).T
    mean = m_pc.mean(axis=0)
    var = v_pc.mean(axis=0) + (m_pc.var(axis=0) if isi_variance else 0.0)
    return mean.squeeze(-1) if mean.shape[-1] == 1 else mean, \
        var.squeeze(-1) if var.shape[-1] == 1 else var


def sub_weights(coeffs: MfDetectorCoefficients) -> np.ndarray:
    return coeffs.H_inv[0] - coeffs.H_inv[1]


def sum_weights(coeffs: MfDetectorCoefficients) -> np.ndarray:
    return coeffs.H_inv.sum(axis=0)


def detector_output_stats(scheme: str, coeffs: MfDetectorCoefficients, L0, L1,
                          isi: IsiStatistics | None, P2=None, *, isi_variance: bool = True
                          ) -> list[GaussianComponent]:
    """Gaussian components of the decision statistic for the 2x2 and 4x4 detectors.

    2x2 returns the four ``yhat_Sub`` states labelled by symbol; 4x4 returns
    the two ``yhat_Sum`` states labelled by data bit. ``isi=None`` switches to
    the exact previous-symbol mixture and then needs ``P2``.
    """
    if scheme == "2x2":
        w = sub_weights(coeffs)
    elif scheme == "4x4":
        w = sum_weights(coeffs)
    else:
        raise ValueError(f"no MF detector for scheme {scheme!r}")
    if isi is None and P2 is None:
        raise ValueError("exact mixture statistics need the slot-two matrix")
    mean, var = statistic_components(w, coeffs.H, P2 if P2 is not None else coeffs.H,
                                     (L0, L1), isi=isi, isi_variance=isi_variance)
    if scheme == "2x2":
        return [GaussianComponent(float(m), float(v), s) for s, (m, v) in enumerate(zip(mean, var))]
    # yhat_Sum is the same for every transmitter; average guards against rounding
    out = []
    for b in (0, 1):
        sel = (np.arange(mean.size) & 1) == b
        out.append(GaussianComponent(float(mean[sel].mean()), float(var[sel].mean()), b))
    return out


# --- detectors --------------------------------------------------------------

def split_symbol(sym) -> tuple[np.ndarray, np.ndarray]:
    sym = np.asarray(sym)
    return sym >> 1, sym & 1


def detect_2x1(count, thresholds: ThresholdSet) -> tuple[np.ndarray, np.ndarray]:
    """Region lookup on the received count; returns (transmitter, data bit)."""
    return split_symbol(thresholds.classify(count))


def detect_2x2(y, coeffs: MfDetectorCoefficients, thresholds: ThresholdSet):
    """Threshold ``yhat_Sub = yhat(1) - yhat(2)``; returns (transmitter, data bit)."""
    yhat = mf_transform(y, coeffs)
    sub = yhat[..., 0] - yhat[..., 1]
    return split_symbol(thresholds.classify(sub))


def detect_4x4(y, coeffs: MfDetectorCoefficients, threshold: ThresholdSet):
    """Two-step decision.

    The receiver with the largest raw count names the transmitter (ties go to
    the lowest index); the data bit comes from thresholding
    ``yhat_Sum = sum(yhat)``.
    """
    y = np.asarray(y, dtype=float)
    tx = np.argmax(y, axis=-1)
    yhat = mf_transform(y, coeffs)
    bit = threshold.classify(yhat.sum(axis=-1))
    return tx, bit


def detect_levels(count, thresholds: ThresholdSet) -> np.ndarray:
    """Level index for single-link concentration keying (BCSK, QCSK)."""
    return thresholds.classify(count)
