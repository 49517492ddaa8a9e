"""Differentiable channel computation along traced propagation paths.

Given a PathSet and an EM property source (static material table or the
trainable field), this module chains antenna responses, local-frame basis
transforms, and Fresnel-based interaction matrices into per-path complex
coefficients, then assembles multi-subcarrier CSI, the time-domain impulse
response, and the two supervised channel parameters (log gain, RMS delay
spread). All arithmetic goes through the autodiff ops, so the exact same
code runs taped (for calibration gradients) or untaped (for prediction).

Spreading: pure-specular paths keep image-theory 1/d_total; single-scatter
paths use 1/(d_in*d_out) with a Lambertian patch factor inside the scatter
matrix. Per-subcarrier delay phases are applied in compute_csi only, so the
path coefficient itself carries no delay phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Complex
from .em_field import EmFieldNet, MaterialTable
from .tracing import C_LIGHT, InteractionKind, PathSet, PropagationPath, angles_of

EPS0 = 8.8541878128e-12
# Floors that keep sqrt differentiable when sigmoid outputs saturate to
# exactly 0/1 in double precision; far below any physical signal level.
_SAT_GUARD = 1e-30
_ABS_GUARD = 1e-120


class ZeroEnergyCsiError(ValueError):
    """CSI carries no energy; channel parameters are undefined."""


@dataclass(frozen=True)
class OfdmConfig:
    fc: float
    w: float
    n: int

    def __post_init__(self):
        if not (self.fc > self.w / 2 > 0):
            raise ValueError("need fc > W/2 > 0")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError("subcarrier count must be a power of two >= 8")

    @property
    def delta_f(self) -> float:
        return self.w / self.n

    def subcarrier_freqs(self) -> np.ndarray:
        idx = np.arange(-self.n // 2, self.n // 2)
        return self.fc + idx * self.delta_f


@dataclass(frozen=True)
class AntennaPattern:
    """3GPP-style parabolic pattern with a slant-polarized single element."""

    phi_3db: float
    theta_3db: float
    g_max_db: float
    a_max_db: float
    slant: float = 0.0

    def __post_init__(self):
        if self.phi_3db <= 0 or self.theta_3db <= 0 or self.a_max_db < 0:
            raise ValueError("beamwidths must be positive and A_max >= 0")

    @classmethod
    def isotropic(cls, slant: float = 0.0) -> "AntennaPattern":
        return cls(2 * math.pi, math.pi, 0.0, 0.0, slant)

    @classmethod
    def measured_omni(cls, slant: float = 0.0) -> "AntennaPattern":
        """360/17-degree beamwidths, 8 dBi peak, 30 dB front-to-back."""
        return cls(2 * math.pi, math.radians(17.0), 8.0, 30.0, slant)


def antenna_gain(pattern: AntennaPattern, phi: float, theta: float) -> float:
    """Directional gain in dB at wrapped azimuth phi and polar angle theta."""
    phi = math.remainder(phi, 2 * math.pi)
    pb = phi / pattern.phi_3db
    tb = (theta - math.pi / 2) / pattern.theta_3db
    return pattern.g_max_db - min(12.0 * (pb * pb + tb * tb), pattern.a_max_db)


def antenna_response(pattern: AntennaPattern, phi: float, theta: float) -> np.ndarray:
    """Polarized field response on the local (theta_hat, phi_hat) basis."""
    amp = 10.0 ** (antenna_gain(pattern, phi, theta) / 20.0)
    return np.array([amp * math.cos(pattern.slant), amp * math.sin(pattern.slant)])


def sph_basis(direction: np.ndarray) -> np.ndarray:
    """Rows (theta_hat, phi_hat) at a unit direction; {theta,phi,dir} is right-handed."""
    phi, theta = angles_of(direction)
    st, ct = math.sin(theta), math.cos(theta)
    sp, cp = math.sin(phi), math.cos(phi)
    return np.array([[ct * cp, ct * sp, -st], [-sp, cp, 0.0]])


def basis_transform(prev_basis: np.ndarray, next_basis: np.ndarray) -> np.ndarray:
    """Change-of-frame matrix between two orthonormal pairs sharing a segment."""
    return next_basis @ prev_basis.T


def fresnel_coeffs(props, fc: float, cos_theta_i) -> tuple[Complex, Complex]:
    """Reflection coefficients (perpendicular, parallel) for a half-space.

    Accepts scalar or per-interaction array values; property fields may be
    taped. cos_theta_i must lie in (0, 1].
    """
    eta = Complex(props.eps_r, -props.sigma / (2 * math.pi * fc * EPS0))
    sin2 = 1.0 - cos_theta_i * cos_theta_i
    st = (eta - sin2).sqrt()
    g_te = (cos_theta_i - st) / (cos_theta_i + st)
    g_tm = (eta * cos_theta_i - st) / (eta * cos_theta_i + st)
    return g_te, g_tm


@dataclass
class _InteractionFactors:
    """Per-interaction complex factors, vectorized across a batch of paths."""

    f_te: Complex
    f_tm: Complex
    s_co: object
    s_cross: object

    def at(self, k: int) -> "_InteractionFactors":
        return _InteractionFactors(
            Complex(ad.take(self.f_te.re, k), ad.take(self.f_te.im, k)),
            Complex(ad.take(self.f_tm.re, k), ad.take(self.f_tm.im, k)),
            ad.take(self.s_co, k),
            ad.take(self.s_cross, k),
        )


def _interaction_factors(cols, cos_i, cos_o, areas, fc) -> _InteractionFactors:
    """Fresnel + roughness + scatter amplitudes for stacked interactions."""
    eps_r, sigma, s, k_chi = cols
    from .em_field import EmProperties

    g_te, g_tm = fresnel_coeffs(EmProperties(eps_r, sigma, s, k_chi), fc, cos_i)
    rough = ad.sqrt(ad.max_const(1.0 - s * s, _SAT_GUARD))
    g_bar = 0.5 * (g_te.abs(guard=_ABS_GUARD) + g_tm.abs(guard=_ABS_GUARD))
    amp = s * g_bar * np.sqrt(areas * cos_i * cos_o / math.pi)
    s_co = amp * ad.sqrt(ad.max_const(1.0 - k_chi, _SAT_GUARD))
    s_cross = amp * ad.sqrt(ad.max_const(k_chi, _SAT_GUARD))
    return _InteractionFactors(g_te * rough, g_tm * rough, s_co, s_cross)


def interaction_matrix(inter, props, fc: float):
    """2x2 field interaction matrix for one reflection or scatter event.

    Reflection: diag(G_te, G_tm) * sqrt(1 - s^2) in the incidence-plane
    frame. Scatter: the cross-polarization split of a Lambertian patch lobe;
    each incident polarization re-radiates total power amp^2.
    """
    g_te, g_tm = fresnel_coeffs(props, fc, inter.cos_theta_i)
    zero = Complex(0.0, 0.0)
    if inter.kind is InteractionKind.REFLECTION:
        rough = ad.sqrt(ad.max_const(1.0 - props.s * props.s, _SAT_GUARD))
        return [[g_te * rough, zero], [zero, g_tm * rough]]
    g_bar = 0.5 * (g_te.abs(guard=_ABS_GUARD) + g_tm.abs(guard=_ABS_GUARD))
    amp = props.s * g_bar * math.sqrt(
        inter.patch_area * inter.cos_theta_i * inter.cos_theta_o / math.pi
    )
    co = amp * ad.sqrt(ad.max_const(1.0 - props.k_chi, _SAT_GUARD))
    cross = amp * ad.sqrt(ad.max_const(props.k_chi, _SAT_GUARD))
    return [[Complex(co, 0.0), Complex(cross, 0.0)],
            [Complex(cross, 0.0), Complex(co, 0.0)]]


def _chain_path(
    path: PropagationPath,
    factors_at,
    tx_pattern: AntennaPattern,
    rx_pattern: AntennaPattern,
    fc: float,
) -> Complex:
    """Run the T/F chain for one path given its per-interaction factors."""
    c_t = antenna_response(tx_pattern, path.phi_tx, path.theta_tx)
    c_r = antenna_response(rx_pattern, path.phi_rx, path.theta_rx)
    dirs = []
    pts = path.points()
    for i in range(len(pts) - 1):
        seg = pts[i + 1] - pts[i]
        dirs.append(seg / np.linalg.norm(seg))
    prev_basis = sph_basis(dirs[0])
    e0 = Complex(float(c_t[0]), 0.0)
    e1 = Complex(float(c_t[1]), 0.0)
    for k, inter in enumerate(path.interactions):
        t = basis_transform(prev_basis, inter.basis_in)
        e0, e1 = t[0, 0] * e0 + t[0, 1] * e1, t[1, 0] * e0 + t[1, 1] * e1
        fk = factors_at(k)
        if inter.kind is InteractionKind.REFLECTION:
            e0, e1 = fk.f_te * e0, fk.f_tm * e1
        else:
            e0, e1 = fk.s_co * e0 + fk.s_cross * e1, fk.s_cross * e0 + fk.s_co * e1
        prev_basis = inter.basis_out
    rx_basis = sph_basis(-dirs[-1])
    t = basis_transform(prev_basis, rx_basis)
    e0, e1 = t[0, 0] * e0 + t[0, 1] * e1, t[1, 0] * e0 + t[1, 1] * e1
    a = float(c_r[0]) * e0 + float(c_r[1]) * e1
    if path.has_scatter:
        spread = 1.0 / (path.segment_lengths[0] * path.segment_lengths[1])
    else:
        spread = 1.0 / path.d_total
    return a * (C_LIGHT / (4 * math.pi * fc) * spread)


def _em_source(field_source, tape=None):
    """Normalize a field source into an object with em_columns()."""
    if isinstance(field_source, EmFieldNet):
        return field_source.evaluator(tape)
    if isinstance(field_source, MaterialTable):
        return field_source
    return field_source  # already an evaluator or table-like


def path_coefficient(
    path: PropagationPath,
    field_source,
    tx_pattern: AntennaPattern,
    rx_pattern: AntennaPattern,
    fc: float,
    tape=None,
) -> Complex:
    """Complex coefficient of a single path (no delay phase, see compute_csi)."""
    source = _em_source(field_source, tape)
    if not path.interactions:
        return _chain_path(path, None, tx_pattern, rx_pattern, fc)
    pts = np.stack([i.point for i in path.interactions])
    cats = [i.category for i in path.interactions]
    cols = source.em_columns(pts, cats)
    cos_i = np.array([i.cos_theta_i for i in path.interactions])
    cos_o = np.array([i.cos_theta_o for i in path.interactions])
    areas = np.array([i.patch_area for i in path.interactions])
    factors = _interaction_factors(cols, cos_i, cos_o, areas, fc)
    return _chain_path(path, factors.at, tx_pattern, rx_pattern, fc)


@dataclass
class Csi:
    """N-subcarrier frequency response as a (re, im) pair of length-N values."""

    re: object
    im: object
    ofdm: OfdmConfig

    def as_complex(self) -> np.ndarray:
        return np.asarray(ad.value_of(self.re)) + 1j * np.asarray(ad.value_of(self.im))

    @classmethod
    def from_complex(cls, h: np.ndarray, ofdm: OfdmConfig) -> "Csi":
        h = np.asarray(h, dtype=np.complex128)
        return cls(h.real.copy(), h.imag.copy(), ofdm)


@dataclass
class ChannelParams:
    """Log channel gain (dB) and RMS delay spread (seconds)."""

    p_db: object
    tau: object

    def values(self) -> tuple[float, float]:
        return float(ad.value_of(self.p_db)), float(ad.value_of(self.tau))


def compute_csi(
    pathset: PathSet,
    field_source,
    tx_pattern: AntennaPattern,
    rx_pattern: AntennaPattern,
    ofdm: OfdmConfig,
    tape=None,
) -> Csi:
    """Sum per-path coefficients with per-subcarrier delay phases.

    The per-interaction material factors for the whole path set are computed
    in one vectorized pass; each path then gathers its own entries, which
    keeps tapes small during calibration.
    """
    if len(pathset.paths) == 0:
        z = np.zeros(ofdm.n)
        return Csi(z, z.copy(), ofdm)
    interactions = [i for p in pathset.paths for i in p.interactions]
    factors = None
    if interactions:
        source = _em_source(field_source, tape)
        pts = np.stack([i.point for i in interactions])
        cats = [i.category for i in interactions]
        cols = source.em_columns(pts, cats)
        cos_i = np.array([i.cos_theta_i for i in interactions])
        cos_o = np.array([i.cos_theta_o for i in interactions])
        areas = np.array([i.patch_area for i in interactions])
        factors = _interaction_factors(cols, cos_i, cos_o, areas, ofdm.fc)

    coeffs = []
    base = 0
    for p in pathset.paths:
        if p.interactions:
            offset = base

            def at(k, _offset=offset):
                return factors.at(_offset + k)

            coeffs.append(_chain_path(p, at, tx_pattern, rx_pattern, ofdm.fc))
            base += len(p.interactions)
        else:
            coeffs.append(_chain_path(p, None, tx_pattern, rx_pattern, ofdm.fc))

    taus = np.array([p.tau for p in pathset.paths])
    phase = -2.0 * math.pi * np.outer(ofdm.subcarrier_freqs(), taus)
    ph_re = np.cos(phase)
    ph_im = np.sin(phase)
    a_re = ad.stack([c.re for c in coeffs])
    a_im = ad.stack([c.im for c in coeffs])
    h_re = ad.matvec(ph_re, a_re) - ad.matvec(ph_im, a_im)
    h_im = ad.matvec(ph_re, a_im) + ad.matvec(ph_im, a_re)
    return Csi(h_re, h_im, ofdm)


@lru_cache(maxsize=8)
def _idft_matrix(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Unitary centered IDFT: taps ell and carriers both run -N/2..N/2-1."""
    idx = np.arange(-n // 2, n // 2)
    w = 2.0 * math.pi * np.outer(idx, idx) / n
    return np.cos(w) / math.sqrt(n), np.sin(w) / math.sqrt(n)


@dataclass
class Cir:
    """Time-domain taps, index ell = -N/2 .. N/2-1 (unitary IDFT of CSI)."""

    re: object
    im: object

    def as_complex(self) -> np.ndarray:
        return np.asarray(ad.value_of(self.re)) + 1j * np.asarray(ad.value_of(self.im))


def csi_to_cir(csi: Csi) -> Cir:
    m_re, m_im = _idft_matrix(csi.ofdm.n)
    re = ad.matvec(m_re, csi.re) - ad.matvec(m_im, csi.im)
    im = ad.matvec(m_re, csi.im) + ad.matvec(m_im, csi.re)
    return Cir(re, im)


def extract_params(csi: Csi, ofdm: OfdmConfig) -> ChannelParams:
    """Log gain and RMS delay spread from the CIR power profile.

    Raises ZeroEnergyCsiError when the CSI carries no energy. A zero-width
    power profile yields tau = 0 exactly (kept off-tape: the sqrt gradient
    is unbounded there and a single-tap profile carries no spread signal).
    """
    cir = csi_to_cir(csi)
    power = cir.re * cir.re + cir.im * cir.im
    p_lin = ad.sum_(power)
    if float(ad.value_of(p_lin)) <= 0.0:
        raise ZeroEnergyCsiError("zero-energy CSI")
    p_db = (10.0 / math.log(10.0)) * ad.log(p_lin)
    ell = np.arange(-ofdm.n // 2, ofdm.n // 2, dtype=np.float64)
    m1 = ad.dot(ell, power) / p_lin
    m2 = ad.dot(ell * ell, power) / p_lin
    var = m2 - m1 * m1
    if float(ad.value_of(var)) <= 0.0:
        return ChannelParams(p_db, 0.0)
    return ChannelParams(p_db, ad.sqrt(var) / ofdm.w)
