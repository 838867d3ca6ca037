"""Closed-form hitting probabilities, fitted channel model and channel matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.optimize import least_squares
from scipy.special import erfc

from .errors import FitFailure, InvalidCount, InvalidGeometry
from .topology import PhysicalParams, Topology


@dataclass(frozen=True)
class LinkGeometry:
    d: float
    Rr: float
    D: float

    def __post_init__(self):
        if not (self.d > 0 and self.Rr > 0 and self.D > 0):
            raise InvalidGeometry("d, Rr and D must be positive")

    @property
    def lam(self) -> float:
        return self.d * self.d / (2.0 * self.D)


def first_arrival_pdf(t, geom: LinkGeometry):
    """Defective Levy density of the first arrival time (1/s); zero for t <= 0."""
    t = np.asarray(t, dtype=float)
    lam = geom.lam
    scale = geom.Rr / (geom.d + geom.Rr)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        f = scale * np.sqrt(lam / (2 * np.pi * t ** 3)) * np.exp(-lam / (2 * t))
    out = np.where(t > 0, f, 0.0)
    return float(out) if out.ndim == 0 else out


def hitting_probability(T, geom: LinkGeometry):
    """Probability that a molecule has been absorbed by time ``T``."""
    T = np.asarray(T, dtype=float)
    if np.any(T < 0):
        raise ValueError("T must be non-negative")
    with np.errstate(divide="ignore"):
        arg = geom.d / np.sqrt(4 * geom.D * T)
    out = geom.Rr / (geom.Rr + geom.d) * erfc(arg)
    out = np.where(T > 0, out, 0.0)
    return float(out) if out.ndim == 0 else out


def slot_probability(k: int, Ts: float, geom: LinkGeometry) -> float:
    """Absorption probability inside slot ``k`` (1-based) of length ``Ts``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return hitting_probability(k * Ts, geom) - hitting_probability((k - 1) * Ts, geom)


@dataclass(frozen=True)
class ControlCoefficients:
    b1: float = 1.0
    b2: float = 0.5
    b3: float = 0.5

    BOUNDS = ((1e-9, 1e-9, 1e-9), (2.0, 1.5, 1.5))

    def __post_init__(self):
        lo, hi = self.BOUNDS
        for v, a, b, name in zip(self.as_tuple(), lo, hi, ("b1", "b2", "b3")):
            if not (a <= v <= b):
                raise InvalidGeometry(f"{name}={v} outside sanity box ({a}, {b}]")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.b1, self.b2, self.b3)


ANALYTIC = ControlCoefficients(1.0, 0.5, 0.5)


def _model(t, d, Rr, D, b1, b2, b3):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        arg = d / ((4.0 * D) ** b2 * np.power(t, b3))
    return np.where(t > 0, b1 * Rr / (d + Rr) * erfc(arg), 0.0)


def model_probability(t, d_ij: float, Rr: float, D: float, coeffs: ControlCoefficients = ANALYTIC):
    """Cumulative hitting probability with control coefficients ``b1..b3``."""
    out = _model(t, d_ij, Rr, D, *coeffs.as_tuple())
    return float(out) if out.ndim == 0 else out


def slot_model_probability(k: int, Ts: float, d_ij: float, Rr: float, D: float,
                           coeffs: ControlCoefficients = ANALYTIC) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    hi = model_probability(k * Ts, d_ij, Rr, D, coeffs)
    lo = 0.0 if k == 1 else model_probability((k - 1) * Ts, d_ij, Rr, D, coeffs)
    return hi - lo


def fit_control_coefficients(t, p_hat, d_ij: float, Rr: float, D: float, *,
                             rmse_ceiling: float = 1e-2, n_starts: int = 8,
                             seed: int = 0) -> tuple[ControlCoefficients, float]:
    """Least-squares fit of ``b1, b2, b3`` to a cumulative hitting-probability curve.

    Bounded trust-region least squares started from the analytic point
    ``(1, 0.5, 0.5)`` and ``n_starts`` jittered copies of it; the best
    solution wins. Raises :class:`FitFailure` for degenerate curves or when
    the RMSE exceeds ``rmse_ceiling``.
    """
    t = np.asarray(t, dtype=float)
    p_hat = np.asarray(p_hat, dtype=float)
    if t.shape != p_hat.shape or t.ndim != 1:
        raise FitFailure("t and p_hat must be 1-D arrays of equal length")
    keep = t > 0
    t, p_hat = t[keep], p_hat[keep]
    if t.size < 10 or t.max() / t.min() < 10:
        raise FitFailure("need >= 10 samples spanning at least one decade in t")
    if not np.isfinite(p_hat).all() or p_hat.max() <= 0:
        raise FitFailure("curve carries no absorption signal")

    lo, hi = ControlCoefficients.BOUNDS
    rng = np.random.default_rng(seed)
    starts = [np.array([1.0, 0.5, 0.5])]
    for _ in range(n_starts):
        s = np.array([1.0, 0.5, 0.5]) * np.exp(rng.normal(0.0, 0.25, 3))
        starts.append(np.clip(s, np.array(lo) * 10, np.array(hi) * 0.99))

    def resid(b):
        return _model(t, d_ij, Rr, D, *b) - p_hat

    best = None
    for x0 in starts:
        r = least_squares(resid, x0, bounds=(lo, hi), method="trf",
                          x_scale=np.array([1.0, 0.5, 0.5]), xtol=1e-12, ftol=1e-12, gtol=1e-12)
        if best is None or r.cost < best.cost:
            best = r
    rmse = float(np.sqrt(np.mean(best.fun ** 2)))
    if not rmse <= rmse_ceiling:
        raise FitFailure(f"fit RMSE {rmse:.3g} exceeds ceiling {rmse_ceiling:.3g}")
    return ControlCoefficients(*map(float, best.x)), rmse


def fit_topology(topology: Topology, params: PhysicalParams, *, molecules: int, num_slots: int,
                 samples: int = 200, rmse_ceiling: float = 1e-2, far_field: bool = True):
    """Simulate emissions and fit one coefficient set per distance class.

    Returns ``{class: (coeffs, rmse)}``.
    """
    from .brownian import simulate_emission

    reps = topology.class_representatives()
    t_end = num_slots * params.Ts
    times = np.linspace(t_end / samples, t_end, samples)
    times = times[times >= params.dt]
    by_emitter: dict[int, list[tuple[int, int]]] = {}
    for cls, (i, j) in reps.items():
        by_emitter.setdefault(j, []).append((cls, i))
    fits = {}
    for j, items in sorted(by_emitter.items()):
        out = simulate_emission(topology, params, j, molecules, num_slots, far_field=far_field)
        curves = out.cumulative(times)
        for cls, i in items:
            d = float(topology.surface_distances()[i, j])
            fits[cls] = fit_control_coefficients(times, curves[i], d, topology.radii[i], params.D,
                                                 rmse_ceiling=rmse_ceiling)
    return dict(sorted(fits.items()))


COEFF_FIELDS = ["distance_class", "distance", "b1", "b2", "b3", "rmse"]


def write_coefficients(path, topology: Topology, fits: Mapping[int, tuple[ControlCoefficients, float]]):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COEFF_FIELDS)
        for cls, (c, rmse) in sorted(fits.items()):
            w.writerow([cls, repr(topology.class_distance(cls)), repr(c.b1), repr(c.b2), repr(c.b3),
                        repr(rmse)])
    return path


def read_coefficients(path) -> dict[int, ControlCoefficients]:
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[int(row["distance_class"])] = ControlCoefficients(
                float(row["b1"]), float(row["b2"]), float(row["b3"]))
    return out


@dataclass(frozen=True)
class MeanChannelMatrix:
    """Expected absorption fractions for one slot offset ``k``."""

    matrix: np.ndarray
    k: int = 1
    class_probabilities: Mapping[int, float] | None = None

    @property
    def shape(self):
        return self.matrix.shape


def mean_channel_matrix(topology: Topology, coeffs: Mapping[int, ControlCoefficients] | None,
                        k: int, params: PhysicalParams) -> MeanChannelMatrix:
    """Per-pair slot-``k`` probabilities from the fitted model.

    ``coeffs=None`` uses the analytic coefficients for every class.
    """
    classes = topology.distance_classes()
    dist = topology.surface_distances()
    probs = {}
    for cls, (i, j) in topology.class_representatives().items():
        c = ANALYTIC if coeffs is None else coeffs[cls]
        probs[cls] = slot_model_probability(k, params.Ts, float(dist[i, j]), float(topology.radii[i]),
                                            params.D, c)
    H = np.vectorize(probs.__getitem__)(classes).astype(float)
    return MeanChannelMatrix(H, k, probs)


def sample_channel_matrix(mean: MeanChannelMatrix | np.ndarray, x, rng: np.random.Generator,
                          size: int | None = None) -> np.ndarray:
    """Normalized Binomial draws ``Binomial(x_j, p_ij) / x_j``."""
    P = mean.matrix if isinstance(mean, MeanChannelMatrix) else np.asarray(mean, dtype=float)
    x = np.broadcast_to(np.asarray(x), (P.shape[1],))
    if np.any(x < 1) or np.any(x != np.round(x)):
        raise InvalidCount("every molecule count x_j must be a positive integer")
    x = x.astype(np.int64)
    shape = P.shape if size is None else (size,) + P.shape
    return rng.binomial(np.broadcast_to(x, shape), np.broadcast_to(P, shape)) / x


def numerical_rank(matrix, tol: float = 1e-8) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    s = np.linalg.svd(np.asarray(matrix, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))
