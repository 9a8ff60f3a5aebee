"""Photon-pair and background generation for a collinear type-II PPKTP source.

Times are in picoseconds, lengths in millimetres. A pair born at depth z
inside a crystal of length L leaves with the H (signal) photon ahead of the
V (idler) photon by D*(L - z); the half-length compensator with swapped axes
adds D*L/2 to the signal, which centres the delay distribution on zero.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .polcore import p_from_visibility
from .seeding import derive_rng

PS_PER_S = 1e12


@dataclass(frozen=True)
class SourceConfig:
    pump_power_mw: float = 10.0
    pair_rate_per_mw: float = 1.05e5
    crystal_length_mm: float = 10.0
    walkoff_ps_per_mm: float = 0.3
    compensator_length_mm: float | None = None
    fluorescence_rate_per_mw: float = 1000.0
    aperture_diameter_mm: float = 1.0
    filter_bandwidth_nm: float = 1.0
    duration_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("pump_power_mw", "pair_rate_per_mw", "crystal_length_mm", "walkoff_ps_per_mm",
                     "fluorescence_rate_per_mw", "aperture_diameter_mm", "filter_bandwidth_nm",
                     "duration_s"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a finite nonnegative number, got {value!r}")
        if self.compensator_length_mm is not None and not self.compensator_length_mm >= 0:
            raise ValueError("compensator_length_mm must be nonnegative")

    @property
    def compensator_mm(self) -> float:
        if self.compensator_length_mm is None:
            return self.crystal_length_mm / 2.0
        return self.compensator_length_mm

    @property
    def pair_rate(self) -> float:
        """Generated pairs per second."""
        return self.pump_power_mw * self.pair_rate_per_mw

    @property
    def fluorescence_rate(self) -> float:
        """Fluorescence photons per second inside the detection band."""
        return self.fluorescence_rate_per_mw * self.pump_power_mw * self.filter_bandwidth_nm

    def with_(self, **changes) -> "SourceConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class PairEvent:
    t_pair: float
    z_origin: float
    t_signal_offset: float
    t_idler_offset: float
    signal_pol: str = "H"
    idler_pol: str = "V"

    @property
    def relative_delay(self) -> float:
        """Signal arrival minus idler arrival, ps."""
        return self.t_signal_offset - self.t_idler_offset


@dataclass
class PairStream:
    """Column store of pair events in time order.

    Signal photons are always H and idlers always V, so polarizations are
    implicit. Indexing and iteration yield :class:`PairEvent` objects.
    """

    t_pair: np.ndarray
    z_origin: np.ndarray
    t_signal_offset: np.ndarray
    t_idler_offset: np.ndarray
    duration_s: float = 0.0
    compensated: bool = False

    def __len__(self) -> int:
        return len(self.t_pair)

    def __getitem__(self, i: int) -> PairEvent:
        return PairEvent(float(self.t_pair[i]), float(self.z_origin[i]),
                         float(self.t_signal_offset[i]), float(self.t_idler_offset[i]))

    def __iter__(self) -> Iterator[PairEvent]:
        for i in range(len(self)):
            yield self[i]

    @property
    def t_signal(self) -> np.ndarray:
        return self.t_pair + self.t_signal_offset

    @property
    def t_idler(self) -> np.ndarray:
        return self.t_pair + self.t_idler_offset

    @property
    def relative_delay(self) -> np.ndarray:
        return self.t_signal_offset - self.t_idler_offset

    @classmethod
    def from_events(cls, events: Sequence[PairEvent], duration_s: float = 0.0) -> "PairStream":
        events = sorted(events, key=lambda e: e.t_pair)
        cols = [np.array([getattr(e, k) for e in events], dtype=float)
                for k in ("t_pair", "z_origin", "t_signal_offset", "t_idler_offset")]
        return cls(*cols, duration_s=duration_s)

    @classmethod
    def empty(cls, duration_s: float = 0.0) -> "PairStream":
        z = np.zeros(0)
        return cls(z, z.copy(), z.copy(), z.copy(), duration_s=duration_s)


@dataclass
class PhotonStream:
    """Uncorrelated single photons (fluorescence, stray light)."""

    t: np.ndarray
    pol: np.ndarray  # 0 = H, 1 = V
    duration_s: float = 0.0

    def __len__(self) -> int:
        return len(self.t)


def poisson_arrivals(rate: float, duration_s: float, rng: np.random.Generator) -> np.ndarray:
    """Homogeneous Poisson arrival times on [0, duration) in ps."""
    if rate <= 0 or duration_s <= 0:
        return np.zeros(0)
    n = rng.poisson(rate * duration_s)
    return np.sort(rng.uniform(0.0, duration_s * PS_PER_S, size=n))


def generate_pair_stream(config: SourceConfig) -> PairStream:
    """Poisson pair arrivals with pre-compensation walkoff offsets."""
    rng = derive_rng(config.seed, "pairs")
    t = poisson_arrivals(config.pair_rate, config.duration_s, rng)
    L = config.crystal_length_mm
    z = rng.uniform(0.0, L, size=len(t))
    idler = config.walkoff_ps_per_mm * (L - z)
    return PairStream(t, z, np.zeros_like(t), idler, duration_s=config.duration_s)


def apply_compensator(event: PairEvent, config: SourceConfig) -> PairEvent:
    """Pass one pair through the axis-swapped KTP compensator."""
    shift = config.walkoff_ps_per_mm * config.compensator_mm
    return replace(event, t_signal_offset=event.t_signal_offset + shift)


def compensate(stream: PairStream, config: SourceConfig) -> PairStream:
    """Vectorised :func:`apply_compensator` over a whole stream."""
    if stream.compensated:
        raise ValueError("stream has already been compensated")
    shift = config.walkoff_ps_per_mm * config.compensator_mm
    return replace(stream, t_signal_offset=stream.t_signal_offset + shift, compensated=True)


def generate_fluorescence(config: SourceConfig) -> PhotonStream:
    """Unpolarised fluorescence photons, independent of the pair stream.

    The 1-nm reference rate is scaled linearly with filter bandwidth.
    """
    rng = derive_rng(config.seed, "fluorescence")
    t = poisson_arrivals(config.fluorescence_rate, config.duration_s, rng)
    pol = rng.integers(0, 2, size=len(t), dtype=np.int8)
    return PhotonStream(t, pol, duration_s=config.duration_s)


@dataclass(frozen=True)
class IndistinguishabilityMap:
    """Interference visibility versus aperture diameter, per filter bandwidth.

    Visibility is interpolated linearly in log-aperture between anchors at
    the same bandwidth and extrapolated with the end segments; the resulting
    indistinguishability is clamped to [0, 1]. Queries at a bandwidth with no
    anchors use the anchors of the nearest bandwidth on a log scale.
    """

    anchors: tuple[tuple[float, float, float], ...]
    name: str = ""
    _curves: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        curves: dict[float, list[tuple[float, float]]] = {}
        for aperture, bandwidth, vis in self.anchors:
            if aperture <= 0 or bandwidth <= 0 or not 0 <= vis <= 1:
                raise ValueError(f"bad anchor {(aperture, bandwidth, vis)}")
            curves.setdefault(float(bandwidth), []).append((math.log(aperture), float(vis)))
        for bw, pts in curves.items():
            pts.sort()
            logs = [x for x, _ in pts]
            vis = [v for _, v in pts]
            if len(set(logs)) != len(logs):
                raise ValueError(f"duplicate aperture anchor at {bw} nm")
            if any(b > a for a, b in zip(vis, vis[1:])):
                raise ValueError(f"anchors at {bw} nm are not non-increasing in aperture")
        object.__setattr__(self, "_curves", curves)

    @property
    def bandwidths(self) -> list[float]:
        return sorted(self._curves)

    def visibility(self, aperture_mm: float, bandwidth_nm: float) -> float:
        bw = min(self._curves, key=lambda b: abs(math.log(b) - math.log(bandwidth_nm)))
        pts = self._curves[bw]
        if len(pts) == 1:
            return pts[0][1]
        if aperture_mm <= 0:
            return 1.0
        x = math.log(aperture_mm)
        xs = [px for px, _ in pts]
        k = min(max(bisect.bisect_right(xs, x), 1), len(pts) - 1)
        (x0, v0), (x1, v1) = pts[k - 1], pts[k]
        v = v0 + (v1 - v0) * (x - x0) / (x1 - x0)
        # p >= 0 corresponds to V >= 1/3
        return float(min(max(v, 1.0 / 3.0), 1.0))

    def p(self, aperture_mm: float, bandwidth_nm: float) -> float:
        return p_from_visibility(self.visibility(aperture_mm, bandwidth_nm))


# Hydrothermally grown crystal with collimating lens.
HYDROTHERMAL_MAP = IndistinguishabilityMap(((1.0, 1.0, 0.99), (3.0, 1.0, 0.90)), name="hydrothermal")

# Flux-grown crystal. The open-iris diameter is not reported; 2 mm assumes
# aperture scales with divergence (0.2 mm <-> 2 mrad, open <-> 20 mrad).
FLUX_GROWN_MAP = IndistinguishabilityMap(((0.2, 1.0, 0.977), (2.0, 1.0, 0.59)), name="flux-grown")

MAPS = {"hydrothermal": HYDROTHERMAL_MAP, "flux-grown": FLUX_GROWN_MAP}


def indistinguishability(config: SourceConfig, imap: IndistinguishabilityMap = HYDROTHERMAL_MAP) -> float:
    """Coherent-pair fraction for the configured aperture and filter."""
    return imap.p(config.aperture_diameter_mm, config.filter_bandwidth_nm)


def merge_streams(*times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge time-ordered arrays; returns merged times and source index per entry."""
    if not times:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    t = np.concatenate(times)
    src = np.concatenate([np.full(len(a), i, dtype=np.int64) for i, a in enumerate(times)])
    order = np.argsort(t, kind="stable")
    return t[order], src[order]
