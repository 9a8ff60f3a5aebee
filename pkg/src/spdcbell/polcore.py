"""Two-photon polarization algebra.

Single-photon operators act on the (H, V) basis. Two-photon density matrices
use the ordered basis (HH, HV, VH, VV) with the first slot belonging to the
transmitted arm (T) and the second to the reflected arm (R).

A PBS sends H to its transmitted port and V to its reflected port, so the
four detectors map onto basis states as TT=H_T, TR=V_T, RT=H_R, RR=V_R.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# Column order of joint_pbs_probabilities.
JOINT_OUTCOMES = ("TT_RT", "TT_RR", "TR_RT", "TR_RR")


class StateError(ValueError):
    """Raised when a matrix is not a valid two-qubit density matrix."""


@dataclass(frozen=True)
class PolOperator:
    """2x2 Jones operator on the (H, V) basis."""

    entries: np.ndarray

    def __post_init__(self):
        m = np.array(self.entries, dtype=complex)
        if m.shape != (2, 2):
            raise ValueError(f"PolOperator needs a 2x2 matrix, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    def __matmul__(self, other: "PolOperator") -> "PolOperator":
        return PolOperator(self.entries @ other.entries)

    def is_unitary(self, atol: float = 1e-12) -> bool:
        m = self.entries
        return bool(np.allclose(m.conj().T @ m, np.eye(2), atol=atol, rtol=0))


@dataclass(frozen=True)
class TwoQubitState:
    """Density matrix over (HH, HV, VH, VV)."""

    rho: np.ndarray

    def __post_init__(self):
        r = np.array(self.rho, dtype=complex)
        if r.shape != (4, 4):
            raise StateError(f"density matrix must be 4x4, got {r.shape}")
        if not np.allclose(r, r.conj().T, atol=1e-12, rtol=0):
            raise StateError("density matrix is not Hermitian")
        if abs(np.trace(r).real - 1.0) > 1e-12 or abs(np.trace(r).imag) > 1e-12:
            raise StateError(f"trace is {np.trace(r)}, expected 1")
        if np.linalg.eigvalsh(r).min() < -1e-10:
            raise StateError("density matrix has a negative eigenvalue")
        r.setflags(write=False)
        object.__setattr__(self, "rho", r)

    @classmethod
    def from_ket(cls, ket) -> "TwoQubitState":
        psi = np.asarray(ket, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    def purity(self) -> float:
        return float(np.trace(self.rho @ self.rho).real)

    def concurrence(self) -> float:
        """Wootters concurrence."""
        yy = np.array([[0, 0, 0, -1], [0, 0, 1, 0], [0, 1, 0, 0], [-1, 0, 0, 0]], dtype=complex)
        rho_tilde = yy @ self.rho.conj() @ yy
        ev = np.linalg.eigvals(self.rho @ rho_tilde).real
        # eigenvalues at roundoff level would otherwise leak in through the sqrt
        ev[ev < 1e-13 * max(ev.max(), 1e-300)] = 0.0
        lam = np.sort(np.sqrt(ev))[::-1]
        return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


@dataclass(frozen=True)
class AnalyzerSetting:
    """Half-wave-plate dial reading for one analysis arm.

    ``frame_offset`` is where the dial zero sits relative to the crystal axes
    and ``mirrored`` flips the sign of the effective angle, as happens when
    an arm's transverse frame is seen through an odd number of reflections.
    """

    theta: float = 0.0
    frame_offset: float = 0.0
    mirrored: bool = False

    @property
    def effective_angle(self) -> float:
        sign = -1.0 if self.mirrored else 1.0
        return sign * (self.theta + self.frame_offset)

    @property
    def analysis_direction(self) -> float:
        """Polarization direction mapped onto the PBS's H port, radians."""
        return 2.0 * self.effective_angle

    def rotated(self, delta: float) -> "AnalyzerSetting":
        return AnalyzerSetting(self.theta + delta, self.frame_offset, self.mirrored)


def _hwp_matrix(alpha):
    c = np.cos(2.0 * alpha)
    s = np.sin(2.0 * alpha)
    return np.array([[c, s], [s, -c]], dtype=complex)


def hwp_operator(setting: AnalyzerSetting) -> PolOperator:
    """Half-wave plate with its fast axis at the setting's effective angle."""
    return PolOperator(_hwp_matrix(setting.effective_angle))


def make_biphoton(phase: float = np.pi) -> TwoQubitState:
    """(|HH> + e^{i phase}|VV>)/sqrt(2); the default phase gives the HOM-null state."""
    return TwoQubitState.from_ket([1.0, 0.0, 0.0, np.exp(1j * phase)])


def make_triplet(phase: float = 0.0) -> TwoQubitState:
    """(|H_T V_R> + e^{i phase}|V_T H_R>)/sqrt(2)."""
    return TwoQubitState.from_ket([0.0, 1.0, np.exp(1j * phase), 0.0])


CLASSICAL_PAIR = TwoQubitState(np.diag([0.0, 0.5, 0.5, 0.0]).astype(complex))


def mix_with_classical(state: TwoQubitState, p: float) -> TwoQubitState:
    """Blend ``state`` with the distinguishable HV/VH mixture, keeping fraction p coherent."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mixing fraction must lie in [0, 1], got {p}")
    return TwoQubitState(p * state.rho + (1.0 - p) * CLASSICAL_PAIR.rho)


def joint_pbs_probabilities(
    state: TwoQubitState, settingT: AnalyzerSetting, settingR: AnalyzerSetting
) -> np.ndarray:
    """Probabilities of the four detector pairs, ordered as ``JOINT_OUTCOMES``."""
    u = np.kron(hwp_operator(settingT).entries, hwp_operator(settingR).entries)
    out = np.einsum("ki,ij,kj->k", u, state.rho, u.conj()).real
    return np.clip(out, 0.0, 1.0)


def batch_joint_probabilities(rho: np.ndarray, alpha_T: np.ndarray, alpha_R: np.ndarray) -> np.ndarray:
    """Vectorised joint probabilities over effective-angle grids.

    ``rho`` has shape (..., 4, 4); ``alpha_T`` and ``alpha_R`` broadcast
    against each other. The result has shape (angles..., states..., 4).
    """
    alpha_T, alpha_R = np.broadcast_arrays(np.asarray(alpha_T, float), np.asarray(alpha_R, float))
    mt = _hwp_matrix_batch(alpha_T)
    mr = _hwp_matrix_batch(alpha_R)
    u = np.einsum("...ac,...bd->...abcd", mt, mr).reshape(alpha_T.shape + (4, 4))
    rho = np.asarray(rho, dtype=complex)
    ushape = u.shape[:-2]
    rshape = rho.shape[:-2]
    u = u.reshape((-1, 4, 4))
    r = rho.reshape((-1, 4, 4))
    p = np.einsum("uki,sij,ukj->usk", u, r, u.conj()).real
    return p.reshape(ushape + rshape + (4,))


def _hwp_matrix_batch(alpha):
    c = np.cos(2.0 * alpha)
    s = np.sin(2.0 * alpha)
    return np.stack([np.stack([c, s], -1), np.stack([s, -c], -1)], -2).astype(complex)


def single_beam_coincidence_prob(theta: float, p: float) -> float:
    """TT/TR coincidence probability for a pair sharing one beam.

    ``theta`` is the effective HWP angle and ``p`` the indistinguishable
    fraction. Indistinguishable pairs bunch at PBS outputs like a HOM dip;
    distinguishable ones split independently.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"indistinguishability must lie in [0, 1], got {p}")
    quantum = np.cos(4.0 * theta) ** 2
    classical = 1.0 - 0.5 * np.sin(4.0 * theta) ** 2
    return float(p * quantum + (1.0 - p) * classical)


def visibility_from_p(p: float) -> float:
    """Interference visibility [C(0)-C(pi/8)]/[C(0)+C(pi/8)] for indistinguishability p."""
    return (1.0 + p) / (3.0 - p)


def p_from_visibility(v: float) -> float:
    """Inverse of :func:`visibility_from_p`, clamped to [0, 1]."""
    return float(np.clip((3.0 * v - 1.0) / (1.0 + v), 0.0, 1.0))
