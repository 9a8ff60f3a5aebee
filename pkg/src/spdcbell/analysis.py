"""Coincidence-scan statistics: accidentals, visibility, sinusoid fits, CHSH.

Scans record coincidence counts against the reflected-arm dial angle at a
fixed transmitted-arm angle. Curves are modelled as

    C(theta) = A + B cos(4 theta + delta)

and fitted as the linear model A + P cos 4theta + Q sin 4theta, so the
fit needs no iteration. The unmeasured detector pairs entering E are read
off the fitted curves a quarter period (pi/4 of dial) later.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import minimize

from .polcore import AnalyzerSetting, TwoQubitState, batch_joint_probabilities, make_triplet

QUARTER = np.pi / 4.0
BELL_THETA_T = (0.0, np.pi / 8.0)
BELL_THETA_R = (np.pi / 16.0, 3.0 * np.pi / 16.0)
# Sign of each E(theta_T, theta_R) term in S.
S_SIGNS = {(0, 0): 1.0, (1, 0): -1.0, (0, 1): 1.0, (1, 1): 1.0}
MEASURED_PAIRS = ("TT_RT", "TR_RR")


class FitError(RuntimeError):
    pass


class UndefinedError(ValueError):
    """A ratio statistic with a vanishing denominator."""


# --- scans --------------------------------------------------------------------


@dataclass
class ScanData:
    """Coincidence counts versus reflected-arm angle at one theta_T.

    ``variances`` default to the counts themselves (Poisson). After accidental
    subtraction they carry the raw-count variance plus the accidental
    estimate's variance, and ``floored`` marks points clipped at zero.
    """

    theta_R: np.ndarray
    counts: dict[str, np.ndarray]
    duration_s: np.ndarray
    theta_T: float = 0.0
    accidental_rate: dict[str, float] = field(default_factory=dict)
    accidental_sigma: dict[str, float] = field(default_factory=dict)
    variances: dict[str, np.ndarray] | None = None
    floored: dict[str, np.ndarray] | None = None
    subtracted: bool = False
    seed: int | None = None

    def __post_init__(self):
        self.theta_R = np.asarray(self.theta_R, dtype=float)
        self.duration_s = np.broadcast_to(np.asarray(self.duration_s, dtype=float), self.theta_R.shape).copy()
        self.counts = {k: np.asarray(v, dtype=float) for k, v in self.counts.items()}
        n = len(self.theta_R)
        if n > 1 and not np.all(np.diff(self.theta_R) > 0):
            raise ValueError("theta_R must be strictly increasing")
        if np.any(self.duration_s <= 0):
            raise ValueError("durations must be positive")
        for k, v in self.counts.items():
            if v.shape != (n,):
                raise ValueError(f"counts for {k} have shape {v.shape}, expected ({n},)")
            if np.any(v < 0):
                raise ValueError(f"negative counts for {k}")

    def __len__(self) -> int:
        return len(self.theta_R)

    @property
    def pairs(self) -> list[str]:
        return list(self.counts)

    def variance(self, pair: str) -> np.ndarray:
        if self.variances is not None and pair in self.variances:
            return self.variances[pair]
        return self.counts[pair]


def subtract_accidentals(scan: ScanData) -> ScanData:
    """Remove calibrated accidentals, flooring at zero."""
    if scan.subtracted:
        raise ValueError("accidentals were already subtracted from this scan")
    counts, var, floored = {}, {}, {}
    for pair, c in scan.counts.items():
        rate = scan.accidental_rate.get(pair, 0.0)
        sig = scan.accidental_sigma.get(pair, 0.0)
        est = rate * scan.duration_s
        raw = c - est
        floored[pair] = raw < 0
        counts[pair] = np.maximum(raw, 0.0)
        var[pair] = scan.variance(pair) + (sig * scan.duration_s) ** 2
    return replace(scan, counts=counts, variances=var, floored=floored, subtracted=True)


def merge_scans(*scans: ScanData) -> ScanData:
    """Concatenate scans taken at the same theta_T, sorted by theta_R."""
    if not scans:
        raise ValueError("nothing to merge")
    first = scans[0]
    for s in scans[1:]:
        if (s.theta_T != first.theta_T or s.subtracted != first.subtracted
                or s.accidental_rate != first.accidental_rate
                or s.accidental_sigma != first.accidental_sigma
                or set(s.counts) != set(first.counts)):
            raise ValueError("scans are not compatible for merging")
    theta = np.concatenate([s.theta_R for s in scans])
    order = np.argsort(theta, kind="stable")

    def cat(get):
        return np.concatenate([get(s) for s in scans])[order]

    counts = {k: cat(lambda s, k=k: s.counts[k]) for k in first.counts}
    variances = floored = None
    if any(s.variances is not None for s in scans):
        variances = {k: cat(lambda s, k=k: s.variance(k)) for k in first.counts}
    if all(s.floored is not None for s in scans):
        floored = {k: cat(lambda s, k=k: s.floored[k]) for k in first.counts}
    return replace(first, theta_R=theta[order], counts=counts, duration_s=cat(lambda s: s.duration_s),
                   variances=variances, floored=floored)


def visibility(c_zero: float, c_eighth: float) -> tuple[float, float]:
    """(C0 - C8)/(C0 + C8) with Poisson-propagated uncertainty."""
    total = c_zero + c_eighth
    if total <= 0:
        raise UndefinedError("visibility is undefined when both counts are zero")
    v = (c_zero - c_eighth) / total
    sigma = 2.0 * math.sqrt(max(c_zero, 0) * max(c_eighth, 0) / total**3)
    return v, sigma


# --- sinusoid fits ------------------------------------------------------------


def _design(theta) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return np.column_stack([np.ones_like(theta), np.cos(4 * theta), np.sin(4 * theta)])


@dataclass(frozen=True)
class SinusoidFit:
    """C(theta) = A + B cos(4 theta + delta), delta in (-pi/2, pi/2]."""

    A: float
    B: float
    delta: float
    covariance: np.ndarray
    linear: np.ndarray
    linear_covariance: np.ndarray
    chi2: float = 0.0
    dof: int = 0
    pair: str = ""
    theta_T: float = 0.0

    def __call__(self, theta):
        return _design(theta) @ self.linear

    def evaluate(self, theta) -> tuple[np.ndarray, np.ndarray]:
        x = _design(theta)
        var = np.einsum("ij,jk,ik->i", x, self.linear_covariance, x)
        return x @ self.linear, np.sqrt(np.maximum(var, 0.0))

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def visibility(self) -> float:
        return abs(self.B) / self.A

    @property
    def visibility_sigma(self) -> float:
        # gradient of |B|/A wrt (A, B, delta)
        g = np.array([-abs(self.B) / self.A**2, np.sign(self.B) / self.A, 0.0])
        return float(math.sqrt(max(g @ self.covariance @ g, 0.0)))


def fit_sinusoid(scan: ScanData, pair: str) -> SinusoidFit:
    """Weighted linear least squares with weights 1/max(variance, 1)."""
    theta = scan.theta_R
    if len(theta) < 6:
        raise FitError(f"need at least 6 points, got {len(theta)}")
    y = scan.counts[pair]
    w = 1.0 / np.maximum(scan.variance(pair), 1.0)
    x = _design(theta)
    sw = np.sqrt(w)
    xw = x * sw[:, None]
    if np.linalg.matrix_rank(xw, tol=1e-10 * np.abs(xw).max()) < 3:
        raise FitError("design matrix is rank deficient for these angles")
    beta, *_ = np.linalg.lstsq(xw, y * sw, rcond=None)
    cov_lin = np.linalg.inv(xw.T @ xw)
    resid = y - x @ beta
    chi2 = float(np.sum(w * resid**2))

    a, p, q = beta
    r2 = p * p + q * q
    if r2 == 0:
        b, delta = 0.0, 0.0
        jac = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    else:
        if p == 0:
            b, delta = -q, np.pi / 2
        else:
            b = math.copysign(math.sqrt(r2), p)
            delta = math.atan(-q / p)
        jac = np.array([
            [1.0, 0.0, 0.0],
            [0.0, p / b, q / b],
            [0.0, q / r2, -p / r2],
        ])
    cov = jac @ cov_lin @ jac.T
    return SinusoidFit(float(a), float(b), float(delta), cov, beta, cov_lin, chi2,
                       len(theta) - 3, pair, scan.theta_T)


def synthetic_counts(theta, A: float, B: float, delta: float) -> np.ndarray:
    return A + B * np.cos(4 * np.asarray(theta, dtype=float) + delta)


def derived_counts(fit: SinusoidFit, theta_R: float) -> tuple[float, float]:
    """Counts of the partner detector pair, read from the fit a quarter period on."""
    v, s = fit.evaluate(theta_R + QUARTER)
    return float(v[0]), float(s[0])


# --- CHSH ---------------------------------------------------------------------


@dataclass(frozen=True)
class EValue:
    E: float
    sigma: float
    theta_T: float
    theta_R: float
    grad_a: np.ndarray
    grad_b: np.ndarray


def chsh_E(fit_tt_rt: SinusoidFit, fit_tr_rr: SinusoidFit, theta_R: float) -> EValue:
    """Correlation from the TT/RT and TR/RR fits plus their shifted partners."""
    x0 = _design(theta_R)[0]
    x1 = _design(theta_R + QUARTER)[0]
    c1, c2 = x0 @ fit_tt_rt.linear, x0 @ fit_tr_rr.linear
    c3, c4 = x1 @ fit_tt_rt.linear, x1 @ fit_tr_rr.linear
    den = c1 + c2 + c3 + c4
    if abs(den) < 1e-300:
        raise UndefinedError("E is undefined: all four coincidence counts vanish")
    e = (c1 + c2 - c3 - c4) / den
    d_plus = (1.0 - e) / den
    d_minus = -(1.0 + e) / den
    ga = d_plus * x0 + d_minus * x1
    gb = d_plus * x0 + d_minus * x1
    var = ga @ fit_tt_rt.linear_covariance @ ga + gb @ fit_tr_rr.linear_covariance @ gb
    return EValue(float(e), float(math.sqrt(max(var, 0.0))), fit_tt_rt.theta_T, float(theta_R), ga, gb)


@dataclass
class ChshResult:
    S: float
    sigma_S: float
    E: dict[tuple[float, float], EValue]
    fits: dict[float, tuple[SinusoidFit, SinusoidFit]]
    sigma_S_bootstrap: float | None = None

    def visibilities(self) -> dict[float, tuple[float, float]]:
        return {tt: (f[0].visibility, f[1].visibility) for tt, f in self.fits.items()}


def _pick_theta(fits: Mapping[float, tuple], target: float) -> float:
    key = min(fits, key=lambda k: abs(k - target))
    if abs(key - target) > 1e-9:
        raise ValueError(f"no fits at theta_T = {target}")
    return key


def chsh_S(fits: Mapping[float, tuple[SinusoidFit, SinusoidFit]]) -> ChshResult:
    """S from fits at theta_T = 0 and pi/8, each a (TT_RT, TR_RR) pair."""
    keys = [_pick_theta(fits, t) for t in BELL_THETA_T]
    total = 0.0
    evals = {}
    grads = {k: [np.zeros(3), np.zeros(3)] for k in keys}
    for i, kt in enumerate(keys):
        fa, fb = fits[kt]
        for j, tr in enumerate(BELL_THETA_R):
            ev = chsh_E(fa, fb, tr)
            sign = S_SIGNS[(i, j)]
            total += sign * ev.E
            evals[(BELL_THETA_T[i], tr)] = ev
            grads[kt][0] = grads[kt][0] + sign * ev.grad_a
            grads[kt][1] = grads[kt][1] + sign * ev.grad_b
    var = 0.0
    for kt in keys:
        fa, fb = fits[kt]
        ga, gb = grads[kt]
        var += ga @ fa.linear_covariance @ ga + gb @ fb.linear_covariance @ gb
    return ChshResult(abs(total), float(math.sqrt(max(var, 0.0))), evals, {k: fits[k] for k in keys})


def chsh_from_scans(scans: Mapping[float, ScanData]) -> ChshResult:
    fits = {tt: (fit_sinusoid(s, "TT_RT"), fit_sinusoid(s, "TR_RR")) for tt, s in scans.items()}
    return chsh_S(fits)


def bootstrap_sigma_S(scans: Mapping[float, ScanData], result: ChshResult, n_draws: int = 200,
                      rng: np.random.Generator | None = None) -> float:
    """Spread of S over parametric redraws of every scan point.

    Each draw replaces the counts by the fitted curve plus Gaussian noise
    with the point's variance and refits all four curves.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    keyed = {_pick_theta(scans, t): scans[_pick_theta(scans, t)] for t in BELL_THETA_T}
    draws = np.empty(n_draws)
    for n in range(n_draws):
        fits = {}
        for tt, scan in keyed.items():
            fkey = _pick_theta(result.fits, tt)
            new_counts = dict(scan.counts)
            for pair, fit in zip(MEASURED_PAIRS, result.fits[fkey]):
                sd = np.sqrt(np.maximum(scan.variance(pair), 1.0))
                new_counts[pair] = np.maximum(fit(scan.theta_R) + sd * rng.standard_normal(len(scan)), 0.0)
            variances = {p: scan.variance(p) for p in scan.counts}
            s2 = replace(scan, counts=new_counts, variances=variances)
            fits[tt] = (fit_sinusoid(s2, "TT_RT"), fit_sinusoid(s2, "TR_RR"))
        draws[n] = chsh_S(fits).S
    return float(np.std(draws, ddof=1))


# --- closed forms and convention calibration ----------------------------------


def closed_form_E(state: TwoQubitState, settingT: AnalyzerSetting, settingR: AnalyzerSetting) -> float:
    """E from exact probabilities, using the same quarter-period substitution as the fits."""
    return float(_closed_E(state.rho, settingT.effective_angle, settingR.effective_angle,
                           -1.0 if settingR.mirrored else 1.0))


def _closed_E(rho, alpha_T, alpha_R, sign_R):
    p0 = batch_joint_probabilities(rho, alpha_T, alpha_R)
    p1 = batch_joint_probabilities(rho, alpha_T, alpha_R + sign_R * QUARTER)
    plus = p0[..., 0] + p0[..., 3]
    minus = p1[..., 0] + p1[..., 3]
    return (plus - minus) / (plus + minus)


@dataclass(frozen=True)
class Convention:
    offset_T: float
    offset_R: float
    mirrored_T: bool
    mirrored_R: bool
    phase: float
    S: float

    def settings(self, theta_T: float, theta_R: float) -> tuple[AnalyzerSetting, AnalyzerSetting]:
        return (AnalyzerSetting(theta_T, self.offset_T, self.mirrored_T),
                AnalyzerSetting(theta_R, self.offset_R, self.mirrored_R))


def closed_form_S(state: TwoQubitState, offset_T: float = 0.0, offset_R: float = 0.0,
                  mirrored_T: bool = False, mirrored_R: bool = False) -> float:
    total = 0.0
    for (i, j), sign in S_SIGNS.items():
        sT = AnalyzerSetting(BELL_THETA_T[i], offset_T, mirrored_T)
        sR = AnalyzerSetting(BELL_THETA_R[j], offset_R, mirrored_R)
        total += sign * closed_form_E(state, sT, sR)
    return abs(total)


def _grid_S(rho_by_phase: np.ndarray, offsets_T, offsets_R, mirrors_T, mirrors_R):
    """S over a full grid, shape (|oT|, |oR|, |phase|, |mT|, |mR|)."""
    oT = np.asarray(offsets_T, float)[:, None, None]
    sT = np.where(np.asarray(mirrors_T), -1.0, 1.0)[None, :, None]
    tT = np.asarray(BELL_THETA_T)[None, None, :]
    aT = sT * (tT + oT)  # (oT, mT, tT)
    oR = np.asarray(offsets_R, float)[:, None, None]
    sR = np.where(np.asarray(mirrors_R), -1.0, 1.0)[None, :, None]
    tR = np.asarray(BELL_THETA_R)[None, None, :]
    aR = sR * (tR + oR)  # (oR, mR, tR)
    sgnR = sR[None, None, None, :, :, :]
    e = _closed_E(rho_by_phase, aT[:, :, :, None, None, None], aR[None, None, None, :, :, :], sgnR)
    # e: (oT, mT, tT, oR, mR, tR, phase)
    s = np.zeros(e.shape[:2] + e.shape[3:5] + e.shape[6:])
    for (i, j), sign in S_SIGNS.items():
        s = s + sign * e[:, :, i, :, :, j, :]
    # (oT, mT, oR, mR, phase) -> (oT, oR, phase, mT, mR)
    return np.abs(s).transpose(0, 2, 4, 1, 3)


def calibrate_conventions(state_constructor: Callable[[float], TwoQubitState] = make_triplet,
                          resolution: float = np.pi / 16, refine: bool = True) -> Convention:
    """Arm offsets, mirror flags and state phase that maximise S.

    Exhaustive search over offsets in [0, pi/2), both mirror flags per arm
    and phases in [0, 2 pi), followed by a local Nelder-Mead polish. Among
    equal maxima the lexicographically smallest (offset_T, offset_R, phase,
    mirrored_T, mirrored_R) wins.
    """
    n_off = round((np.pi / 2) / resolution)
    if n_off < 1 or abs(n_off * resolution - np.pi / 2) > 1e-9:
        raise ValueError("resolution must divide pi/2")
    offsets = np.arange(n_off) * resolution
    phases = np.arange(4 * n_off) * resolution
    rho = np.stack([state_constructor(ph).rho for ph in phases])
    flags = (False, True)
    s = _grid_S(rho, offsets, offsets, flags, flags)
    best = s.max()
    flat = np.flatnonzero(s.ravel() >= best - 1e-9)[0]
    iT, iR, iP, mT, mR = np.unravel_index(flat, s.shape)
    conv = Convention(float(offsets[iT]), float(offsets[iR]), bool(mT), bool(mR),
                      float(phases[iP]), float(s[iT, iR, iP, mT, mR]))
    if refine:
        conv = _refine(conv, state_constructor)
    return conv


def _refine(conv: Convention, state_constructor) -> Convention:
    def neg_s(x):
        return -closed_form_S(state_constructor(x[2]), x[0], x[1], conv.mirrored_T, conv.mirrored_R)

    x0 = np.array([conv.offset_T, conv.offset_R, conv.phase])
    res = minimize(neg_s, x0, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000,
                            "initial_simplex": x0 + np.vstack([np.zeros(3), 0.05 * np.eye(3)])})
    if -res.fun > conv.S + 1e-10:
        oT, oR, ph = res.x
        return Convention(float(oT % (np.pi / 2)), float(oR % (np.pi / 2)), conv.mirrored_T,
                          conv.mirrored_R, float(ph % (2 * np.pi)), float(-res.fun))
    return conv


@functools.lru_cache(maxsize=1)
def default_convention() -> Convention:
    """Calibrated convention for the ideal triplet, used by the Bell bench."""
    return calibrate_conventions()
