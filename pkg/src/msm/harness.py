"""End-to-end BER and throughput experiments.

A run draws uniform bits, maps them to per-slot emissions, pushes the
emissions through a channel and counts bit errors after detection. Channels
either draw counts from the per-pair slot probabilities (``binomial``,
``normal`` or noiseless ``none``) or from the particle engine. In the particle
case every emission of ``x`` molecules is split by one multinomial draw over
"absorbed by receiver i during lag l" outcomes whose probabilities the engine
has estimated; because molecules move independently this has the same law as
walking all ``x`` of them.

Detectors are designed from the closed-form or fitted model, never from the
particle law, so a particle run measures how well that model carries over to
the engine.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .brownian import simulate_emission
from .channel import mean_channel_matrix, numerical_rank, read_coefficients, sample_channel_matrix
from .config import ExperimentConfig, SystemConfig
from .detection import (GaussianComponent, ThresholdSet, build_thresholds, detect_2x1, detect_2x2,
                        detect_4x4, detect_levels, detector_output_stats, isi_statistics,
                        merge_coincident, mf_coefficients, statistic_components)
from .errors import ConfigError
from .modulation import (MoleculeBudget, bits_per_symbol, default_targets_2x1, msm_bits,
                         optimize_budget_2x1, qcsk_levels)
from .topology import PhysicalParams, Topology

VAR_FLOOR = 1e-9


# --- channel ----------------------------------------------------------------

def model_probabilities(topology: Topology, params: PhysicalParams, memory: int = 1,
                        coeffs=None) -> np.ndarray:
    """(memory + 1, n_rx, n_tx) slot probabilities for lags 0..memory."""
    return np.stack([mean_channel_matrix(topology, coeffs, k + 1, params).matrix
                     for k in range(memory + 1)])


_LAW_CACHE: dict = {}


def particle_law(topology: Topology, params: PhysicalParams, memory: int, molecules: int,
                 far_field: bool = True) -> np.ndarray:
    """(n_tx, (memory + 1) n_rx + 1) per-molecule outcome probabilities from the engine.

    Column ``lag * n_rx + i`` is absorption by receiver ``i`` during the
    ``lag``-th slot after emission; the last column is everything else.
    """
    key = (topology.transmitters.tobytes(), topology.centers.tobytes(), topology.radii.tobytes(),
           params, memory, int(molecules), far_field)
    if key in _LAW_CACHE:
        return _LAW_CACHE[key]
    nk = (memory + 1) * topology.n_rx
    law = np.zeros((topology.n_tx, nk + 1))
    for j in range(topology.n_tx):
        out = simulate_emission(topology, params, j, molecules, memory + 1, far_field=far_field)
        law[j, :nk] = (out.hits / out.M).T.ravel()
    law[:, nk] = np.clip(1.0 - law[:, :nk].sum(axis=1), 0.0, 1.0)
    law.setflags(write=False)
    _LAW_CACHE[key] = law
    return law


@dataclass(frozen=True)
class StatisticalChannel:
    P: np.ndarray          # (memory + 1, n_rx, n_tx)
    noise: str = "binomial"

    def receive(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        X = np.asarray(X, dtype=np.int64)
        S = X.shape[0]
        n_rx = self.P.shape[1]
        Y = np.zeros((S, n_rx))
        var = np.zeros((S, n_rx))
        for lag, P in enumerate(self.P):
            if lag >= S:
                break
            src = X[:S - lag]
            if self.noise == "binomial":
                counts = rng.binomial(np.broadcast_to(src[:, None, :], (src.shape[0],) + P.shape),
                                      np.broadcast_to(P, (src.shape[0],) + P.shape))
                Y[lag:] += counts.sum(axis=2)
            else:
                Y[lag:] += src @ P.T
                var[lag:] += src @ (P * (1 - P)).T
        if self.noise == "normal":
            Y += np.sqrt(var) * rng.standard_normal(Y.shape)
        return Y


@dataclass(frozen=True)
class ParticleChannel:
    law: np.ndarray        # (n_tx, (memory + 1) n_rx + 1)
    n_rx: int

    @property
    def memory(self) -> int:
        return (self.law.shape[1] - 1) // self.n_rx - 1

    def receive(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        X = np.asarray(X, dtype=np.int64)
        S = X.shape[0]
        counts = rng.multinomial(X, self.law)          # (S, n_tx, K)
        Y = np.zeros((S, self.n_rx))
        for lag in range(self.memory + 1):
            part = counts[:, :, lag * self.n_rx:(lag + 1) * self.n_rx].sum(axis=1)
            Y[lag:] += part[:S - lag]
        return Y


# --- transceivers -----------------------------------------------------------

def _component(mean, var, label) -> GaussianComponent:
    return GaussianComponent(float(mean), max(float(var), VAR_FLOOR), int(label))


class MsmTransceiver:
    """Spatial modulation with the scheme-specific detector."""

    def __init__(self, scheme: str, budget: MoleculeBudget, P1, P2, *, isi_model: str = "mixture",
                 isi_variance: bool = True):
        self.scheme = scheme
        self.budget = budget
        self.P1 = np.asarray(P1, dtype=float)
        self.P2 = np.asarray(P2, dtype=float)
        self.n_tx = self.P1.shape[1]
        self.bits_per_symbol = bits_per_symbol(scheme)
        L0, L1 = budget.L0, budget.L1
        if scheme == "2x1":
            mean, var = statistic_components([1.0], self.P1, self.P2, (L0, L1),
                                             isi_variance=isi_variance)
            self.coeffs = None
            comps = [_component(m, v, s) for s, (m, v) in enumerate(zip(mean, var))]
        else:
            self.coeffs = mf_coefficients(self.P1)
            isi = isi_statistics(self.P2[0], L0, L1) if isi_model == "scalar" else None
            comps = [_component(g.mean, g.var, g.label) for g in
                     detector_output_stats(scheme, self.coeffs, L0, L1, isi, self.P2,
                                           isi_variance=isi_variance)]
        self.components = comps
        self.thresholds = build_thresholds(merge_coincident(comps))

    def emissions(self, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.int64)
        tx = np.zeros(bits.shape[0], dtype=np.int64)
        for col in range(bits.shape[1] - 1):
            tx = (tx << 1) | bits[:, col]
        X = np.zeros((bits.shape[0], self.n_tx), dtype=np.int64)
        X[np.arange(bits.shape[0]), tx] = np.where(bits[:, -1] == 1, self.budget.L1, self.budget.L0)
        return X

    def detect(self, Y: np.ndarray) -> np.ndarray:
        if self.scheme == "2x1":
            tx, bit = detect_2x1(Y[:, 0], self.thresholds)
        elif self.scheme == "2x2":
            tx, bit = detect_2x2(Y, self.coeffs, self.thresholds)
        else:
            tx, bit = detect_4x4(Y, self.coeffs, self.thresholds)
        return msm_bits(tx, bit, self.scheme).reshape(-1, self.bits_per_symbol)

    def threshold_sets(self) -> dict[str, ThresholdSet]:
        return {f"msm-{self.scheme}": self.thresholds}


def level_components(levels, p1: float, p2: float) -> list[GaussianComponent]:
    """Count moments on a single link for each level, mixed over the previous level."""
    Lv = np.asarray(levels, dtype=float)
    isi_m = Lv.mean() * p2
    isi_v = Lv.mean() * p2 * (1 - p2) + Lv.var() * p2 * p2
    return [_component(L * p1 + isi_m, L * p1 * (1 - p1) + isi_v, k) for k, L in enumerate(Lv)]


class CskTransceiver:
    """Single-link concentration keying; symbol value ``v`` (natural binary) sends ``levels[v]``."""

    def __init__(self, levels, P1, P2):
        self.levels = np.asarray(levels, dtype=np.int64)
        n = self.levels.size
        if n & (n - 1) or n < 2:
            raise ConfigError("number of levels must be a power of two")
        self.bits_per_symbol = int(math.log2(n))
        self.n_tx = 1
        p1 = float(np.asarray(P1).ravel()[0])
        p2 = float(np.asarray(P2).ravel()[0])
        self.components = level_components(self.levels, p1, p2)
        self.thresholds = build_thresholds(merge_coincident(self.components))

    def emissions(self, bits):
        bits = np.asarray(bits, dtype=np.int64)
        v = bits @ (1 << np.arange(bits.shape[1] - 1, -1, -1))
        return self.levels[v][:, None]

    def detect(self, Y):
        v = detect_levels(Y[:, 0], self.thresholds)
        shifts = np.arange(self.bits_per_symbol - 1, -1, -1)
        return (v[:, None] >> shifts) & 1

    def threshold_sets(self):
        return {f"csk-{self.levels.size}": self.thresholds}


def pairwise_components(P1, P2, L1_pair: int, i: int) -> list[GaussianComponent]:
    """Count moments at receiver ``i`` for own bit 0/1 under on-off keying on every link.

    Other links' current bits and every previous bit are independent fair
    coins, folded in as exact mixture moments.
    """
    L = float(L1_pair)
    P1 = np.asarray(P1, dtype=float)
    P2 = np.asarray(P2, dtype=float)
    others = np.arange(P1.shape[1]) != i
    p_o = P1[i, others]
    q = P2[i]
    base_m = (0.5 * L * p_o).sum() + (0.5 * L * q).sum()
    base_v = (0.5 * L * p_o * (1 - p_o) + 0.25 * L * L * p_o ** 2).sum() \
        + (0.5 * L * q * (1 - q) + 0.25 * L * L * q ** 2).sum()
    p = P1[i, i]
    return [_component(base_m, base_v, 0), _component(L * p + base_m, L * p * (1 - p) + base_v, 1)]


class PairwiseTransceiver:
    """Every transmitter keys its own receiver on-off in every slot."""

    def __init__(self, L1_pair: int, P1, P2):
        self.L1_pair = int(L1_pair)
        self.P1 = np.asarray(P1, dtype=float)
        self.n_tx = self.P1.shape[1]
        self.bits_per_symbol = self.n_tx
        self.per_rx = [build_thresholds(merge_coincident(pairwise_components(P1, P2, self.L1_pair, i)))
                       for i in range(self.n_tx)]

    def emissions(self, bits):
        return np.asarray(bits, dtype=np.int64) * self.L1_pair

    def detect(self, Y):
        return np.stack([ts.classify(Y[:, i]) for i, ts in enumerate(self.per_rx)], axis=1)

    def threshold_sets(self):
        return {f"pairwise-rx{i + 1}": ts for i, ts in enumerate(self.per_rx)}


# --- results ----------------------------------------------------------------

@dataclass(frozen=True)
class BerResult:
    system: str
    scheme: str
    modulation: str
    avg_molecules: float
    L0: int
    L1: int
    errors: int
    trials: int
    bits_per_symbol: int
    ber: float
    stderr: float
    throughput: float
    Ts: float
    seed: int
    config_hash: str

    @classmethod
    def from_counts(cls, *, errors: int, trials: int, bits_per_symbol: int, Ts: float, **kw):
        bits = trials * bits_per_symbol
        ber = errors / bits
        se = math.sqrt(ber * (1 - ber) / bits)
        return cls(errors=int(errors), trials=int(trials), bits_per_symbol=int(bits_per_symbol),
                   ber=ber, stderr=se, throughput=throughput(bits_per_symbol, Ts, ber), Ts=float(Ts),
                   **kw)


def throughput(bits_per_symbol: float, Ts: float, ber: float) -> float:
    """Bits per second delivered: ``bits_per_symbol / Ts * (1 - BER)``."""
    if not Ts > 0:
        raise ValueError("Ts must be positive")
    if not 0 <= ber <= 1:
        raise ValueError("BER must lie in [0, 1]")
    return bits_per_symbol / Ts * (1 - ber)


# --- experiment plumbing ----------------------------------------------------

@dataclass
class SystemSetup:
    """Everything needed to simulate one system at one sweep point."""

    system: SystemConfig
    params: PhysicalParams
    topology: Topology
    design_P: np.ndarray
    truth: StatisticalChannel | ParticleChannel


def _coeffs(cfg: ExperimentConfig, system: SystemConfig):
    return read_coefficients(cfg.resolve(system.coefficients))


def prepare_system(cfg: ExperimentConfig, system: SystemConfig) -> SystemSetup:
    ch = cfg.channel
    params = cfg.params_for(system)
    topo = system.make_topology()
    mem = ch.isi_memory
    design = ch.design or ("closed-form" if ch.source == "particle" else ch.source)
    coeffs = _coeffs(cfg, system) if design == "fitted" else None
    design_P = model_probabilities(topo, params, max(mem, 1), coeffs)
    if ch.source == "particle":
        truth = ParticleChannel(particle_law(topo, params, mem, ch.law_molecules), topo.n_rx)
    else:
        tc = _coeffs(cfg, system) if ch.source == "fitted" else None
        truth = StatisticalChannel(model_probabilities(topo, params, mem, tc), ch.noise)
    return SystemSetup(system, params, topo, design_P, truth)


def load_targets(path):
    arr = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    if arr.shape[1] != 2:
        raise ConfigError("targets file needs two columns: b, c")
    return arr[:, 0], arr[:, 1]


def make_transceiver(cfg: ExperimentConfig, setup: SystemSetup, point: dict):
    """Resolve the molecule budget for ``point`` and build the transceiver."""
    s = setup.system
    P1, P2 = setup.design_P[0], setup.design_P[1]
    basis = cfg.sweep.basis
    avg = point.get("avg")
    ch = cfg.channel
    if s.modulation == "msm":
        bps = bits_per_symbol(s.scheme)
        if "L0" in point:
            L_total = point["L_total"]
            budget = MoleculeBudget(point["L0"], L_total - point["L0"])
        else:
            L_total = int(round(2 * avg * (bps if basis == "per-bit" else 1)))
            r = s.budget
            if r.rule == "fixed":
                budget = MoleculeBudget(r.L0, r.L1)
            elif r.rule == "optimize":
                targets = load_targets(cfg.resolve(r.targets)) if r.targets else None
                budget = optimize_budget_2x1(P1[0], P2[0], L_total, targets, r.span)
            else:
                L0 = min(max(int(math.floor(r.fraction * L_total + 0.5)), 1), L_total - 1)
                budget = MoleculeBudget(L0, L_total - L0)
        trx = MsmTransceiver(s.scheme, budget, P1, P2, isi_model=ch.isi_model,
                             isi_variance=ch.isi_variance == "kept")
        return trx, budget.L0, budget.L1
    if s.modulation == "ook":
        L1 = int(round(2 * avg))
        return CskTransceiver([0, L1], P1, P2), 0, L1
    if s.modulation == "qcsk":
        levels = qcsk_levels(avg * (2 if basis == "per-bit" else 1))
        return CskTransceiver(levels, P1, P2), int(levels[0]), int(levels[-1])
    n = setup.topology.n_tx
    L1 = int(round(2 * avg if basis == "per-bit" else 2 * avg / n))
    return PairwiseTransceiver(L1, P1, P2), 0, L1


def point_seeds(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Bit and channel generators for sweep point ``index``; shared by every system."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def simulate_errors(trx, channel, n_symbols: int, rng_bits, rng_channel, memory: int = 1,
                    chunk: int = 50_000) -> int:
    """Bit errors over ``n_symbols`` scored symbols after ``memory`` warm-up slots."""
    errors = 0
    done = 0
    tail_bits = None
    tail_X = None
    while done < n_symbols:
        m = min(chunk, n_symbols - done)
        bits = rng_bits.integers(0, 2, size=(m + (memory if tail_bits is None else 0),
                                             trx.bits_per_symbol))
        X = trx.emissions(bits)
        if tail_X is not None:
            # carry the previous chunk's last slots so ISI crosses chunk edges
            bits = np.vstack([tail_bits, bits])
            X = np.vstack([tail_X, X])
        Y = channel.receive(X, rng_channel)
        hat = trx.detect(Y[memory:])
        errors += int(np.count_nonzero(hat != bits[memory:]))
        tail_bits, tail_X = bits[-memory:], X[-memory:]
        done += m
    return errors


def run_system(cfg: ExperimentConfig, system: SystemConfig, *, setup: SystemSetup | None = None
               ) -> list[BerResult]:
    setup = setup or prepare_system(cfg, system)
    out = []
    for k, point in enumerate(cfg.sweep.points):
        trx, L0, L1 = make_transceiver(cfg, setup, point)
        rb, rc = point_seeds(cfg.seed, k)
        errs = simulate_errors(trx, setup.truth, cfg.symbols, rb, rc, cfg.channel.isi_memory)
        avg = point.get("avg", point.get("L_total", 0) / 2)
        out.append(BerResult.from_counts(
            system=system.name, scheme=system.scheme, modulation=system.modulation,
            avg_molecules=float(avg), L0=L0, L1=L1, errors=errs, trials=cfg.symbols,
            bits_per_symbol=trx.bits_per_symbol, Ts=setup.params.Ts, seed=cfg.seed,
            config_hash=cfg.hash))
    return out


def run_ber(cfg: ExperimentConfig) -> list[BerResult]:
    """BER sweep for every system that is not a baseline."""
    return [r for s in cfg.systems if not s.is_baseline for r in run_system(cfg, s)]


def run_baseline(cfg: ExperimentConfig) -> list[BerResult]:
    """BER sweep for the QCSK and pairwise baselines listed in ``cfg``."""
    return [r for s in cfg.systems if s.is_baseline for r in run_system(cfg, s)]


def run_experiment(cfg: ExperimentConfig) -> list[BerResult]:
    return [r for s in cfg.systems for r in run_system(cfg, s)]


def threshold_dump(cfg: ExperimentConfig) -> dict[str, ThresholdSet]:
    sets = {}
    for s in cfg.systems:
        setup = prepare_system(cfg, s)
        for k, point in enumerate(cfg.sweep.points):
            trx, _, _ = make_transceiver(cfg, setup, point)
            for name, ts in trx.threshold_sets().items():
                sets[f"{s.name}/{name}/point{k}"] = ts
    return sets


# --- export -----------------------------------------------------------------

RESULT_FIELDS = [f.name for f in fields(BerResult)]
_INTS = {"L0", "L1", "errors", "trials", "bits_per_symbol", "seed"}
_FLOATS = {"avg_molecules", "ber", "stderr", "throughput", "Ts"}


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def results_csv(results: Sequence[BerResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in results:
        w.writerow([_fmt(v) for v in asdict(r).values()])
    return buf.getvalue()


def summary_table(results: Sequence[BerResult]) -> str:
    lines = [f"{'system':<16} {'avg':>9} {'L0':>6} {'L1':>6} {'errors':>8} {'bits':>9} "
             f"{'BER':>11} {'stderr':>10} {'thru(b/s)':>10}"]
    for r in results:
        lines.append(f"{r.system:<16} {r.avg_molecules:>9.1f} {r.L0:>6d} {r.L1:>6d} {r.errors:>8d} "
                     f"{r.trials * r.bits_per_symbol:>9d} {r.ber:>11.4e} {r.stderr:>10.3e} "
                     f"{r.throughput:>10.4f}")
    return "\n".join(lines) + "\n"


def export_results(results: Sequence[BerResult], path) -> tuple[Path, Path]:
    """Write ``<path>`` (CSV) and a sibling ``.txt`` summary; ``path`` may be a directory."""
    path = Path(path)
    if path.suffix.lower() != ".csv":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "ber.csv"
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(results_csv(results))
    summary = path.with_suffix(".txt")
    summary.write_text(summary_table(results))
    return path, summary


def read_results(path) -> list[BerResult]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                kw[k] = int(v) if k in _INTS else float(v) if k in _FLOATS else v
            out.append(BerResult(**kw))
    return out


# --- channel-level experiments ---------------------------------------------

def rank_sweep(topology_fn, values, draws: int, molecules: int, params: PhysicalParams,
               seed: int = 0) -> list[tuple[float, float]]:
    """Fraction of full-rank sampled channel matrices at each swept geometry value."""
    out = []
    for k, v in enumerate(values):
        topo = topology_fn(v)
        mean = mean_channel_matrix(topo, None, 1, params)
        rng = np.random.default_rng([int(seed), k])
        H = sample_channel_matrix(mean, molecules, rng, size=draws)
        full = sum(numerical_rank(h) == topo.n_rx for h in H)
        out.append((float(v), full / draws))
    return out


def default_targets(cfg: ExperimentConfig, system: SystemConfig, L_total: int):
    setup = prepare_system(cfg, system)
    return default_targets_2x1(setup.design_P[0][0], setup.design_P[1][0], L_total)
