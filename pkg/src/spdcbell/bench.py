"""Discrete-event model of the four-detector Bell/interference bench.

Pair photons are routed by a removable 50/50 beam splitter into the
transmitted (T) and reflected (R) arms, analysed by a half-wave plate and a
PBS in each arm, thinned by optical and detector losses, blurred by jitter,
and finally turned into dead-time limited click trains. All work is done on
numpy columns; the per-event types exist for inspection and export.

Detector names follow ``<arm><port>``: TT and RT sit on the PBS transmitted
(H) ports, TR and RR on the reflected (V) ports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Iterator, Mapping

import numpy as np

from .polcore import (
    AnalyzerSetting,
    joint_pbs_probabilities,
    make_triplet,
    mix_with_classical,
    single_beam_coincidence_prob,
)
from .seeding import derive_rng
from .source import (
    PS_PER_S,
    PairStream,
    PhotonStream,
    SourceConfig,
    compensate,
    generate_fluorescence,
    generate_pair_stream,
    poisson_arrivals,
)

DETECTORS = ("TT", "TR", "RT", "RR")
DETECTOR_PAIRS = tuple(f"{a}_{b}" for a, b in combinations(DETECTORS, 2))
PS_PER_NS = 1e3

# Tags on arrivals and clicks: >= 0 is the index of the parent pair.
TAG_BACKGROUND = -1
TAG_DARK = -2

ARM_T, ARM_R = 0, 1


class ContractError(ValueError):
    """An input stream broke an ordering or consistency contract."""


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 0.525
    dark_rate: float = 50.0
    dead_time_ns: float = 50.0
    pulse_width_ns: float = 35.0
    jitter_ns: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        for name in ("dark_rate", "dead_time_ns", "pulse_width_ns", "jitter_ns"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _default_detectors() -> dict[str, DetectorConfig]:
    return {d: DetectorConfig() for d in DETECTORS}


@dataclass(frozen=True)
class BenchConfig:
    """Optical bench settings.

    ``path_transmission`` lumps the interference filter, collection and
    coupling losses of each arm ahead of the detectors; together with the
    detector efficiency it sets the conditional detection efficiency.
    ``mix_p`` is the coherent pair fraction used both for the cross-arm
    Bell state and for single-beam interference.
    """

    use_beam_splitter: bool = True
    settingT: AnalyzerSetting = AnalyzerSetting()
    settingR: AnalyzerSetting = AnalyzerSetting()
    coincidence_window_ns: float = 70.0
    detectors: Mapping[str, DetectorConfig] = field(default_factory=_default_detectors)
    triplet_phase: float = 0.0
    mix_p: float = 1.0
    path_transmission: float = 0.4

    def __post_init__(self):
        if not self.coincidence_window_ns > 0:
            raise ValueError("coincidence_window_ns must be positive")
        if not 0.0 <= self.mix_p <= 1.0:
            raise ValueError(f"mix_p must lie in [0, 1], got {self.mix_p}")
        if not 0.0 <= self.path_transmission <= 1.0:
            raise ValueError("path_transmission must lie in [0, 1]")
        if set(self.detectors) != set(DETECTORS):
            raise ValueError(f"detectors must be exactly {DETECTORS}")

    def with_(self, **changes) -> "BenchConfig":
        return replace(self, **changes)

    def with_thetas(self, theta_T: float | None = None, theta_R: float | None = None) -> "BenchConfig":
        sT, sR = self.settingT, self.settingR
        if theta_T is not None:
            sT = replace(sT, theta=theta_T)
        if theta_R is not None:
            sR = replace(sR, theta=theta_R)
        return replace(self, settingT=sT, settingR=sR)

    def state(self):
        return mix_with_classical(make_triplet(self.triplet_phase), self.mix_p)

    def setting(self, arm: int) -> AnalyzerSetting:
        return self.settingT if arm == ARM_T else self.settingR


# --- streams ------------------------------------------------------------------


@dataclass
class Channel:
    """Time-ordered arrivals or clicks on one detector, in ps."""

    t: np.ndarray
    tag: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls) -> "Channel":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64))

    def is_ordered(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0))


@dataclass(frozen=True)
class ClickRecord:
    detector: str
    t: float
    tag: int = TAG_BACKGROUND


@dataclass
class ClickStream:
    channels: dict[str, Channel]
    duration_s: float

    def __getitem__(self, detector: str) -> Channel:
        return self.channels[detector]

    def records(self) -> Iterator[ClickRecord]:
        """All clicks merged in time order (ties broken by detector order)."""
        t = np.concatenate([self.channels[d].t for d in DETECTORS])
        tag = np.concatenate([self.channels[d].tag for d in DETECTORS])
        det = np.concatenate([np.full(len(self.channels[d]), i) for i, d in enumerate(DETECTORS)])
        for i in np.lexsort((det, t)):
            yield ClickRecord(DETECTORS[det[i]], float(t[i]), int(tag[i]))

    def singles(self) -> dict[str, int]:
        return {d: len(self.channels[d]) for d in DETECTORS}


def _channels_from_columns(det: np.ndarray, t: np.ndarray, tag: np.ndarray) -> dict[str, Channel]:
    out = {}
    for i, d in enumerate(DETECTORS):
        sel = det == i
        ti, gi = t[sel], tag[sel]
        order = np.argsort(ti, kind="stable")
        out[d] = Channel(ti[order], gi[order])
    return out


# --- optics -------------------------------------------------------------------


@dataclass
class Routing:
    signal_arm: np.ndarray
    idler_arm: np.ndarray

    @property
    def split(self) -> np.ndarray:
        return self.signal_arm != self.idler_arm


def route_pair(pairs: PairStream, bench: BenchConfig, rng: np.random.Generator) -> Routing:
    """Send each photon of each pair to T or R.

    With the beam splitter in place the two photons choose independently;
    without it both stay in T. No post-selection happens here.
    """
    n = len(pairs)
    if not bench.use_beam_splitter:
        zeros = np.zeros(n, dtype=np.int8)
        return Routing(zeros, zeros.copy())
    arms = rng.integers(0, 2, size=(2, n), dtype=np.int8)
    return Routing(arms[0], arms[1])


def _jitter(det: np.ndarray, bench: BenchConfig, rng: np.random.Generator) -> np.ndarray:
    sig = np.array([bench.detectors[d].jitter_ns * PS_PER_NS for d in DETECTORS])[det]
    return rng.standard_normal(len(det)) * sig


def measure_pair(pairs: PairStream, routing: Routing, bench: BenchConfig,
                 rng: np.random.Generator, tag_offset: int = 0) -> dict[str, Channel]:
    """Sample PBS ports for every routed photon and return per-detector arrivals.

    Split pairs draw one of the four joint outcomes of the mixed triplet.
    Pairs sharing an arm split across that arm's PBS with the single-beam
    coincidence probability and otherwise bunch into one port chosen at
    random. Photons then survive the path transmission and receive detector
    jitter. Arrivals carry the parent pair index (plus ``tag_offset``).
    """
    n = len(pairs)
    sig_arm = routing.signal_arm.astype(np.int64)
    idl_arm = routing.idler_arm.astype(np.int64)
    # port 0 = H (transmitted), 1 = V (reflected)
    sig_port = np.zeros(n, dtype=np.int64)
    idl_port = np.ones(n, dtype=np.int64)

    split = sig_arm != idl_arm
    ns = int(split.sum())
    if ns:
        probs = joint_pbs_probabilities(bench.state(), bench.settingT, bench.settingR)
        k = _categorical(probs, ns, rng)
        port_T, port_R = k // 2, k % 2
        sig_in_T = sig_arm[split] == ARM_T
        sig_port[split] = np.where(sig_in_T, port_T, port_R)
        idl_port[split] = np.where(sig_in_T, port_R, port_T)

    for arm in (ARM_T, ARM_R):
        same = (~split) & (sig_arm == arm)
        m = int(same.sum())
        if not m:
            continue
        pc = single_beam_coincidence_prob(bench.setting(arm).effective_angle, bench.mix_p)
        u = rng.random(m)
        together = rng.integers(0, 2, size=m)
        apart = u < pc
        sig_port[same] = np.where(apart, 0, together)
        idl_port[same] = np.where(apart, 1, together)

    t = np.concatenate([pairs.t_signal, pairs.t_idler])
    det = np.concatenate([2 * sig_arm + sig_port, 2 * idl_arm + idl_port])
    tag = np.tile(np.arange(n, dtype=np.int64) + tag_offset, 2)
    keep = rng.random(2 * n) < bench.path_transmission
    t, det, tag = t[keep], det[keep], tag[keep]
    t = t + _jitter(det, bench, rng)
    return _channels_from_columns(det, t, tag)


def route_background(photons: PhotonStream, bench: BenchConfig,
                     rng: np.random.Generator) -> dict[str, Channel]:
    """Route uncorrelated photons through the same optics as pair photons."""
    n = len(photons)
    if bench.use_beam_splitter:
        arm = rng.integers(0, 2, size=n)
    else:
        arm = np.zeros(n, dtype=np.int64)
    alpha = np.where(arm == ARM_T, bench.settingT.effective_angle, bench.settingR.effective_angle)
    p_h = np.where(photons.pol == 0, np.cos(2 * alpha) ** 2, np.sin(2 * alpha) ** 2)
    port = (rng.random(n) >= p_h).astype(np.int64)
    det = 2 * arm + port
    keep = rng.random(n) < bench.path_transmission
    det, t = det[keep], photons.t[keep]
    t = t + _jitter(det, bench, rng)
    return _channels_from_columns(det, t, np.full(len(t), TAG_BACKGROUND, dtype=np.int64))


def stray_light(rates: Mapping[str, float], duration_s: float,
                rng: np.random.Generator) -> dict[str, Channel]:
    """Independent Poisson stray-light arrivals injected directly at detectors."""
    out = {}
    for d in DETECTORS:
        t = poisson_arrivals(rates.get(d, 0.0), duration_s, rng)
        out[d] = Channel(t, np.full(len(t), TAG_BACKGROUND, dtype=np.int64))
    return out


def _categorical(probs: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), len(probs) - 1)


# --- detection ----------------------------------------------------------------


def dead_time_mask(t: np.ndarray, dead_ps: float) -> np.ndarray:
    """Keep-mask for a non-paralysable dead time on ordered arrivals."""
    n = len(t)
    keep = np.ones(n, dtype=bool)
    if n < 2 or dead_ps <= 0:
        return keep
    # Only arrivals within dead_ps of their raw predecessor can be lost.
    cand = np.flatnonzero(np.diff(t) < dead_ps) + 1
    last_kept = {}
    for j in cand:
        p = j - 1
        ref = t[p] if keep[p] else last_kept[p]
        if t[j] - ref < dead_ps:
            keep[j] = False
            last_kept[j] = ref
    return keep


def detect(arrivals: list[Mapping[str, Channel]], detectors: Mapping[str, DetectorConfig],
           duration_s: float, rng: np.random.Generator) -> ClickStream:
    """Turn photon arrivals into clicks.

    Each arrival fires its detector with probability ``efficiency``; dark
    counts are added as Poisson streams; anything landing inside a
    detector's dead time after a click is dropped.
    """
    channels = {}
    for d in DETECTORS:
        cfg = detectors[d]
        parts = [a[d] for a in arrivals if d in a]
        for c in parts:
            if not c.is_ordered():
                raise ContractError(f"arrivals at {d} are not time-ordered")
        t = np.concatenate([c.t for c in parts]) if parts else np.zeros(0)
        tag = np.concatenate([c.tag for c in parts]) if parts else np.zeros(0, dtype=np.int64)
        fired = rng.random(len(t)) < cfg.efficiency
        t, tag = t[fired], tag[fired]
        dark = poisson_arrivals(cfg.dark_rate, duration_s, rng)
        t = np.concatenate([t, dark])
        tag = np.concatenate([tag, np.full(len(dark), TAG_DARK, dtype=np.int64)])
        order = np.argsort(t, kind="stable")
        t, tag = t[order], tag[order]
        keep = dead_time_mask(t, cfg.dead_time_ns * PS_PER_NS)
        channels[d] = Channel(t[keep], tag[keep])
    return ClickStream(channels, duration_s)


# --- coincidence logic --------------------------------------------------------


def match_coincidences(ta: np.ndarray, tb: np.ndarray, window_ns: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy one-to-one matching of two ordered click trains.

    ``window_ns`` is the full width of the AND gate, so a and b coincide
    when |t_a - t_b| <= window_ns / 2. Clicks are consumed in time order and
    used at most once. Returns matched index arrays into ``ta`` and ``tb``.
    """
    ta = np.asarray(ta, dtype=float)
    tb = np.asarray(tb, dtype=float)
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    if len(ta) == 0 or len(tb) == 0:
        return empty
    h = window_ns * PS_PER_NS / 2.0
    a_lo = np.searchsorted(tb, ta - h, side="left")
    a_hi = np.searchsorted(tb, ta + h, side="right")
    b_lo = np.searchsorted(ta, tb - h, side="left")
    b_hi = np.searchsorted(ta, tb + h, side="right")
    na = a_hi - a_lo
    nb = b_hi - b_lo

    # Isolated one-to-one pairs need no sequential logic.
    ia = np.flatnonzero(na == 1)
    jb = a_lo[ia]
    unique = nb[jb] == 1
    ia_u, jb_u = ia[unique], jb[unique]

    busy_a = np.flatnonzero(na > 0)
    busy_b = np.flatnonzero(nb > 0)
    done_a = np.zeros(len(ta), dtype=bool)
    done_b = np.zeros(len(tb), dtype=bool)
    done_a[ia_u] = True
    done_b[jb_u] = True
    rest_a = busy_a[~done_a[busy_a]]
    rest_b = busy_b[~done_b[busy_b]]

    ma, mb = [], []
    i = j = 0
    ra, rb = ta[rest_a], tb[rest_b]
    while i < len(rest_a) and j < len(rest_b):
        d = rb[j] - ra[i]
        if d < -h:
            j += 1
        elif d > h:
            i += 1
        else:
            ma.append(rest_a[i])
            mb.append(rest_b[j])
            i += 1
            j += 1
    ia_all = np.concatenate([ia_u, np.array(ma, dtype=np.int64)])
    jb_all = np.concatenate([jb_u, np.array(mb, dtype=np.int64)])
    order = np.argsort(ia_all, kind="stable")
    return ia_all[order], jb_all[order]


def count_coincidences(clicksA, clicksB, window_ns: float) -> int:
    ta = clicksA.t if isinstance(clicksA, Channel) else clicksA
    tb = clicksB.t if isinstance(clicksB, Channel) else clicksB
    return len(match_coincidences(ta, tb, window_ns)[0])


@dataclass
class Histogram:
    edges_ps: np.ndarray
    counts: np.ndarray
    width_ps: float | None = None

    @property
    def centers_ps(self) -> np.ndarray:
        return 0.5 * (self.edges_ps[:-1] + self.edges_ps[1:])

    @property
    def bin_width_ps(self) -> float:
        if self.width_ps is not None:
            return self.width_ps
        return float(self.edges_ps[1] - self.edges_ps[0]) if len(self.edges_ps) > 1 else 0.0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def mean(self) -> float:
        if self.total == 0:
            return float("nan")
        return float(np.dot(self.centers_ps, self.counts) / self.total)

    def support(self) -> tuple[float, float]:
        """Edges of the outermost occupied bins."""
        nz = np.flatnonzero(self.counts)
        if len(nz) == 0:
            return (float("nan"), float("nan"))
        return float(self.edges_ps[nz[0]]), float(self.edges_ps[nz[-1] + 1])


def start_stop_delays(clicksA, clicksB, span_ns: float) -> np.ndarray:
    """t_b - t_a for the nearest b around each a, kept when within the span."""
    ta = np.asarray(clicksA.t if isinstance(clicksA, Channel) else clicksA, dtype=float)
    tb = np.asarray(clicksB.t if isinstance(clicksB, Channel) else clicksB, dtype=float)
    if len(ta) == 0 or len(tb) == 0:
        return np.zeros(0)
    k = np.searchsorted(tb, ta)
    after = np.where(k < len(tb), tb[np.minimum(k, len(tb) - 1)] - ta, np.inf)
    before = np.where(k > 0, tb[np.maximum(k - 1, 0)] - ta, -np.inf)
    d = np.where(np.abs(before) <= np.abs(after), before, after)
    return d[np.abs(d) <= span_ns * PS_PER_NS]


def start_stop_histogram(clicksA, clicksB, bin_width_ps: float, span_ns: float) -> Histogram:
    """Histogram of nearest-neighbour delays on a grid symmetric about zero."""
    if not bin_width_ps > 0:
        raise ValueError("bin_width_ps must be positive")
    d = start_stop_delays(clicksA, clicksB, span_ns)
    if len(d) == 0:
        return Histogram(np.zeros(0), np.zeros(0, dtype=np.int64), float(bin_width_ps))
    nb = int(math.ceil(span_ns * PS_PER_NS / bin_width_ps - 1e-9))
    edges = np.arange(-nb, nb + 1, dtype=float) * bin_width_ps
    idx = np.floor(d / bin_width_ps).astype(np.int64) + nb
    idx = np.clip(idx, 0, 2 * nb - 1)
    counts = np.bincount(idx, minlength=2 * nb).astype(np.int64)
    return Histogram(edges, counts, float(bin_width_ps))


# --- full runs ----------------------------------------------------------------


@dataclass
class RunResult:
    duration_s: float
    singles: dict[str, int]
    coincidences: dict[str, int]
    true_coincidences: dict[str, int]
    clicks: ClickStream | None = None
    n_pairs: int = 0

    def singles_rate(self, d: str) -> float:
        return self.singles[d] / self.duration_s

    def rate(self, pair: str) -> float:
        return self.coincidences[pair] / self.duration_s


def pairwise_counts(clicks: ClickStream, window_ns: float) -> tuple[dict[str, int], dict[str, int]]:
    coinc, true = {}, {}
    for a, b in combinations(DETECTORS, 2):
        ca, cb = clicks[a], clicks[b]
        ia, jb = match_coincidences(ca.t, cb.t, window_ns)
        key = f"{a}_{b}"
        coinc[key] = len(ia)
        ga, gb = ca.tag[ia], cb.tag[jb]
        true[key] = int(np.count_nonzero((ga >= 0) & (ga == gb)))
    return coinc, true


def simulate_clicks(bench: BenchConfig, source: SourceConfig, duration_s: float | None = None,
                    stray_rates: Mapping[str, float] | None = None,
                    compensated: bool = True) -> tuple[ClickStream, int]:
    """Generate, route, measure and detect one fixed-setting point."""
    if duration_s is not None:
        source = source.with_(duration_s=duration_s)
    dur = source.duration_s
    pairs = generate_pair_stream(source)
    if compensated:
        pairs = compensate(pairs, source)
    seed = source.seed
    routing = route_pair(pairs, bench, derive_rng(seed, "route"))
    streams = [measure_pair(pairs, routing, bench, derive_rng(seed, "measure"))]
    fl = generate_fluorescence(source)
    if len(fl):
        streams.append(route_background(fl, bench, derive_rng(seed, "background")))
    if stray_rates:
        streams.append(stray_light(stray_rates, dur, derive_rng(seed, "stray")))
    clicks = detect(streams, bench.detectors, dur, derive_rng(seed, "detect"))
    return clicks, len(pairs)


def run_point(bench: BenchConfig, source: SourceConfig, duration_s: float | None = None,
              stray_rates: Mapping[str, float] | None = None, keep_clicks: bool = False) -> RunResult:
    """Singles and all six pairwise coincidence counts at one setting."""
    clicks, n = simulate_clicks(bench, source, duration_s, stray_rates)
    coinc, true = pairwise_counts(clicks, bench.coincidence_window_ns)
    return RunResult(clicks.duration_s, clicks.singles(), coinc, true,
                     clicks if keep_clicks else None, n)


def analyze_clicks(clicks: ClickStream, window_ns: float) -> RunResult:
    coinc, true = pairwise_counts(clicks, window_ns)
    return RunResult(clicks.duration_s, clicks.singles(), coinc, true, clicks, 0)


@dataclass(frozen=True)
class AccidentalCalibration:
    """Effective coincidence window of one detector pair."""

    pair: str
    window_ns: float
    sigma_window_ns: float
    coincidences: int
    rate_a: float
    rate_b: float
    duration_s: float

    @property
    def accidental_rate(self) -> float:
        """Accidental rate observed during the calibration run, per s."""
        return self.coincidences / self.duration_s

    def predict(self, rate_a: float, rate_b: float) -> tuple[float, float]:
        """Accidental rate and its uncertainty for given singles rates."""
        f = rate_a * rate_b * 1e-9
        return f * self.window_ns, f * self.sigma_window_ns


def calibrate_accidentals(bench: BenchConfig, background: RunResult) -> dict[str, AccidentalCalibration]:
    """Effective window per pair from a pump-blocked run with stray light.

    window = C / (N1 * N2 * T) with N in counts/s; the uncertainty is the
    Poisson error of C.
    """
    out = {}
    T = background.duration_s
    for key in DETECTOR_PAIRS:
        a, b = key.split("_")
        na, nb = background.singles[a] / T, background.singles[b] / T
        if na == 0 or nb == 0:
            raise CalibrationError(f"no singles on {a if na == 0 else b}; cannot calibrate {key}")
        c = background.coincidences[key]
        scale = 1e9 / (na * nb * T)
        out[key] = AccidentalCalibration(key, c * scale, math.sqrt(max(c, 1)) * scale, c, na, nb, T)
    return out


def background_run(bench: BenchConfig, source: SourceConfig, stray_rate: float,
                   duration_s: float) -> RunResult:
    """Pump blocked, stray light of ``stray_rate`` per second on every detector."""
    blocked = source.with_(pump_power_mw=0.0, duration_s=duration_s)
    return run_point(bench, blocked, stray_rates={d: stray_rate for d in DETECTORS})


# --- reference operating point ----------------------------------------------

# Per-arm conditional detection efficiency: 0.4 path transmission x 0.525 QE.
CONDITIONAL_EFFICIENCY = 0.4 * 0.525
PEAK_PAIR_COINCIDENCES = 1200.0
BELL_PUMP_MW = 10.0


def bell_pair_rate() -> float:
    """Generated pairs/s that give ~1200/s at the peak of a cross-arm curve.

    A cross-arm pair comes from a split pair (1/2) landing on the favoured
    outcome (1/2) and surviving both arms.
    """
    return PEAK_PAIR_COINCIDENCES * 4.0 / CONDITIONAL_EFFICIENCY**2


def bell_bench(theta_T: float = 0.0, theta_R: float = 0.0, mix_p: float = 0.93, **changes) -> BenchConfig:
    """Beam-splitter bench at the calibrated arm conventions."""
    from .analysis import default_convention

    conv = default_convention()
    bench = BenchConfig(
        use_beam_splitter=True,
        settingT=AnalyzerSetting(theta_T, conv.offset_T, conv.mirrored_T),
        settingR=AnalyzerSetting(theta_R, conv.offset_R, conv.mirrored_R),
        triplet_phase=conv.phase,
        mix_p=mix_p,
    )
    return bench.with_(**changes) if changes else bench


def bell_source(duration_s: float = 10.0, seed: int = 0, **changes) -> SourceConfig:
    src = SourceConfig(pump_power_mw=BELL_PUMP_MW, pair_rate_per_mw=bell_pair_rate() / BELL_PUMP_MW,
                       duration_s=duration_s, seed=seed)
    return src.with_(**changes) if changes else src


def arrival_rate_per_detector(bench: BenchConfig, source: SourceConfig, efficiency: float) -> float:
    """Mean photon arrival rate at one detector for a given per-arm efficiency.

    Pairs contribute two photons and fluorescence one, shared over the two
    (no splitter) or four (splitter) detectors in use.
    """
    n_det = 4 if bench.use_beam_splitter else 2
    return (2.0 * source.pair_rate + source.fluorescence_rate) * efficiency / n_det


def transmission_for_conditional_efficiency(target: float, bench: BenchConfig, source: SourceConfig,
                                            detector: str = "TT", tol: float = 1e-12) -> float:
    """Path transmission that makes the realised per-arm detection probability ``target``.

    A measured conditional efficiency already includes dead-time losses at
    the running count rate. With a non-paralysable dead time tau a detector
    seeing n clicks/s keeps a fraction 1/(1 + n*tau), so we solve
    t*QE/(1 + n(t)*tau) = target by fixed-point iteration.
    """
    cfg = bench.detectors[detector]
    tau = cfg.dead_time_ns * 1e-9
    t = target / cfg.efficiency
    for _ in range(200):
        eta = t * cfg.efficiency
        n = arrival_rate_per_detector(bench, source, eta) + cfg.dark_rate
        new = target * (1.0 + n * tau) / cfg.efficiency
        if abs(new - t) < tol:
            t = new
            break
        t = new
    if not 0 < t <= 1:
        raise ValueError(f"target efficiency {target} unreachable (transmission {t:.4f})")
    return t
