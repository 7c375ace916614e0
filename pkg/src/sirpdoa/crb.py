"""Cramer-Rao bound on the transmit/receive angles under compound-Gaussian
clutter.

The bound factorizes into a scalar Fisher factor contributed by the
clutter distribution (``fisher_factor``) and an array-geometry part built
from whitened steering derivatives projected off the steering span.  The
2K x 2K bound matrix is ordered [all DODs, then all DOAs].

Two algebraically equivalent assemblies exist: a Hadamard product with the
averaged amplitude outer product (primary) and an explicit sum of
per-pulse amplitude-diagonal factors (retained as a cross-check oracle).

``aggregate_db`` fixes the single dB convention used everywhere in this
package for bound and MSE curves: total (summed over the 2K angles) mean
squared error in degrees squared, in decibels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as _mod
from .clutter import ClutterModel, TextureFamily, TextureKind
from .model import ArrayGeometry, Scene
from .specfun import (
    DEFAULT_QUADRATURE,
    QuadratureSpec,
    integrate_halfline_log,
    log_bessel_k,
    log_gamma,
)

RAD_TO_DEG_SQ = (180.0 / math.pi) ** 2


@dataclass(eq=False)
class CrbResult:
    """Bound matrix in radians^2 (order: DODs then DOAs), the clutter
    Fisher factor, and the per-angle diagonal."""

    matrix: np.ndarray
    kappa: float
    per_angle_bound: np.ndarray


def fisher_factor(texture: TextureFamily, mn: int,
                  spec: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """Scalar Fisher information factor of the clutter distribution.

    Closed form for the t family.  For the K family a half-line integral
    of a Bessel-ratio integrand, evaluated with log-domain Bessel values
    and a max-log shift.
    """
    a, b = texture.shape, texture.scale
    if texture.family is TextureKind.T_DISTRIBUTED:
        return mn * a * (a + mn) / (b * (a + mn + 1.0))

    def log_integrand(x):
        x = np.asarray(x, dtype=float)
        return ((mn + a - 1.0) * np.log(x)
                + 2.0 * log_bessel_k(a - mn - 1.0, x)
                - log_bessel_k(a - mn, x))

    log_num = integrate_halfline_log(log_integrand, spec)
    log_den = ((mn + a - 2.0) * math.log(2.0) + math.log(b)
               + log_gamma(float(mn)) + log_gamma(a))
    return math.exp(log_num - log_den)


def steering_derivatives(geom: ArrayGeometry, scene: Scene):
    """Derivatives of the virtual steering vectors in the transmit and
    receive angles, evaluated at the scene's targets.  Returns a pair of
    (MN, K) matrices."""
    d_tx = []
    d_rx = []
    for dod, doa in zip(scene.dod, scene.doa):
        a_t = _mod.steering_vector(geom.tx_positions, geom.wavelength, dod)
        a_r = _mod.steering_vector(geom.rx_positions, geom.wavelength, doa)
        phase_t = 2j * math.pi * math.cos(dod) * np.asarray(geom.tx_positions) \
            / geom.wavelength
        phase_r = 2j * math.pi * math.cos(doa) * np.asarray(geom.rx_positions) \
            / geom.wavelength
        d_tx.append(np.kron(phase_t * a_t, a_r))
        d_rx.append(np.kron(a_t, phase_r * a_r))
    return np.column_stack(d_tx), np.column_stack(d_rx)


def _inv_sqrt_hermitian(sigma: np.ndarray) -> np.ndarray:
    w, u = np.linalg.eigh(np.asarray(sigma, dtype=complex))
    if np.any(w <= 0.0):
        raise ValueError("covariance must be positive-definite")
    return (u * w ** -0.5) @ u.conj().T


def _whitened_parts(geom, scene, clutter):
    # The Hermitian inverse square root is the one canonical whitener here
    # so the two bound assemblies agree to roundoff.
    w = _inv_sqrt_hermitian(clutter.speckle_cov)
    a = _mod.steering_matrix(geom, scene)
    d_t, d_r = steering_derivatives(geom, scene)
    aw = w @ a
    dw = w @ np.hstack([d_t, d_r])
    p_perp = np.eye(geom.virtual_size, dtype=complex) \
        - aw @ np.linalg.solve(aw.conj().T @ aw, aw.conj().T)
    core = dw.conj().T @ p_perp @ dw
    v = _mod.signal_block(scene)
    return core, v


def angle_crb(geom: ArrayGeometry, scene: Scene, clutter: ClutterModel,
              spec: QuadratureSpec = DEFAULT_QUADRATURE) -> CrbResult:
    """Bound on the 2K angles via the Hadamard-product assembly."""
    mn = geom.virtual_size
    kappa = fisher_factor(clutter.texture, mn, spec)
    core, v = _whitened_parts(geom, scene, clutter)
    pulses = scene.pulses
    vv = v.T @ v.conj()  # sum over pulses of outer products
    p_hat = np.kron(np.ones((2, 2)), vv) / pulses
    fim = 2.0 * kappa * pulses / mn * np.real(core * p_hat.T)
    try:
        matrix = np.linalg.inv(fim)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Fisher information matrix is singular "
                         "(coincident targets?)") from exc
    matrix = 0.5 * (matrix + matrix.T)
    return CrbResult(matrix=matrix, kappa=kappa,
                     per_angle_bound=np.diag(matrix).copy())


def angle_crb_pulse_sum(geom: ArrayGeometry, scene: Scene,
                        clutter: ClutterModel,
                        spec: QuadratureSpec = DEFAULT_QUADRATURE) -> CrbResult:
    """Same bound assembled from explicit per-pulse amplitude diagonals
    (cross-check form)."""
    mn = geom.virtual_size
    kappa = fisher_factor(clutter.texture, mn, spec)
    core, v = _whitened_parts(geom, scene, clutter)
    k = scene.num_targets
    acc = np.zeros((2 * k, 2 * k), dtype=complex)
    eye2 = np.eye(2)
    for l in range(scene.pulses):
        h_l = np.kron(eye2, np.diag(v[l]))
        acc += h_l.conj().T @ core @ h_l
    fim = 2.0 * kappa / mn * np.real(acc)
    matrix = np.linalg.inv(fim)
    matrix = 0.5 * (matrix + matrix.T)
    return CrbResult(matrix=matrix, kappa=kappa,
                     per_angle_bound=np.diag(matrix).copy())


def aggregate_db(result: CrbResult) -> float:
    """The package-wide dB convention: summed per-angle bound, converted
    to degrees squared, in decibels.  MSE curves use the matching sum over
    angle errors so bound and estimator curves share an axis."""
    total = float(np.sum(result.per_angle_bound)) * RAD_TO_DEG_SQ
    return 10.0 * math.log10(total)
