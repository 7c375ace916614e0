"""MIMO array geometry, steering vectors, signal synthesis and SCR bookkeeping.

Angles are radians everywhere in this package; degrees exist only at the
CLI/config boundary.  The virtual (post matched filter) steering vector for
a transmit/receive angle pair stacks the receive index fastest, i.e. it is
the column-stacked outer product of the receive and transmit steering
vectors.  The Cramer-Rao derivative matrices rely on this ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .specfun import DomainError
from . import clutter as _clutter


def _as_tuple(values, kind=float):
    return tuple(kind(v) for v in values)


@dataclass(frozen=True)
class ArrayGeometry:
    """Transmit/receive sensor offsets (meters) and carrier wavelength."""

    tx_positions: tuple
    rx_positions: tuple
    wavelength: float

    def __post_init__(self):
        object.__setattr__(self, "tx_positions", _as_tuple(self.tx_positions))
        object.__setattr__(self, "rx_positions", _as_tuple(self.rx_positions))
        object.__setattr__(self, "wavelength", float(self.wavelength))
        if len(self.tx_positions) < 1 or len(self.rx_positions) < 1:
            raise ValueError("geometry needs at least one sensor on each side")
        if not (self.wavelength > 0.0) or not math.isfinite(self.wavelength):
            raise DomainError(f"wavelength must be positive, got {self.wavelength}")
        if not all(math.isfinite(p) for p in self.tx_positions + self.rx_positions):
            raise ValueError("sensor positions must be finite")

    @property
    def num_tx(self) -> int:
        return len(self.tx_positions)

    @property
    def num_rx(self) -> int:
        return len(self.rx_positions)

    @property
    def virtual_size(self) -> int:
        return self.num_tx * self.num_rx


def half_wavelength_ula(num_tx: int, num_rx: int, wavelength: float = 1.0) -> ArrayGeometry:
    """Uniform linear arrays with half-wavelength spacing on both sides."""
    d = wavelength / 2.0
    return ArrayGeometry(
        tx_positions=tuple(d * i for i in range(num_tx)),
        rx_positions=tuple(d * i for i in range(num_rx)),
        wavelength=wavelength,
    )


@dataclass(frozen=True)
class Scene:
    """Targets (angles in radians, complex amplitudes, normalized Doppler)
    plus the pulse count and snapshots per pulse."""

    dod: tuple
    doa: tuple
    rcs: tuple
    doppler: tuple
    pulses: int
    snapshots_per_pulse: int

    def __post_init__(self):
        object.__setattr__(self, "dod", _as_tuple(self.dod))
        object.__setattr__(self, "doa", _as_tuple(self.doa))
        object.__setattr__(self, "rcs", _as_tuple(self.rcs, complex))
        object.__setattr__(self, "doppler", _as_tuple(self.doppler))
        k = len(self.dod)
        if k < 1 or any(len(x) != k for x in (self.doa, self.rcs, self.doppler)):
            raise ValueError("dod, doa, rcs and doppler must share a length K >= 1")
        if self.pulses < 1 or self.snapshots_per_pulse < 1:
            raise ValueError("pulses and snapshots_per_pulse must be >= 1")
        for th in self.dod + self.doa:
            if not (abs(th) < math.pi / 2.0):
                raise DomainError(f"angles must lie in (-pi/2, pi/2), got {th}")

    @property
    def num_targets(self) -> int:
        return len(self.dod)

    @property
    def angle_pairs(self) -> np.ndarray:
        """(K, 2) array of (dod, doa) per target, radians."""
        return np.column_stack([self.dod, self.doa])


@dataclass(eq=False)
class ObservationBlock:
    """Matched-filtered snapshots, one MN-vector per pulse, shape (L, MN)."""

    snapshots: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.snapshots, dtype=complex)
        if z.ndim != 2:
            raise ValueError("snapshots must be a 2-D (pulses, MN) array")
        if not np.all(np.isfinite(z)):
            raise ValueError("snapshots must be finite")
        self.snapshots = z

    @property
    def pulses(self) -> int:
        return self.snapshots.shape[0]

    @property
    def virtual_size(self) -> int:
        return self.snapshots.shape[1]


def steering_vector(positions, wavelength: float, theta: float) -> np.ndarray:
    """Unit-modulus array response for a linear array at angle ``theta``."""
    if not (wavelength > 0.0):
        raise DomainError(f"wavelength must be positive, got {wavelength}")
    if not (abs(theta) < math.pi / 2.0):
        raise DomainError(f"angle must lie in (-pi/2, pi/2), got {theta}")
    pos = np.asarray(positions, dtype=float)
    return np.exp(2j * math.pi * math.sin(theta) * pos / wavelength)


def virtual_steering(geom: ArrayGeometry, dod: float, doa: float) -> np.ndarray:
    """MN-dimensional response of the virtual array, receive index fastest."""
    a_t = steering_vector(geom.tx_positions, geom.wavelength, dod)
    a_r = steering_vector(geom.rx_positions, geom.wavelength, doa)
    return np.kron(a_t, a_r)


def steering_matrix(geom: ArrayGeometry, scene: Scene) -> np.ndarray:
    """(MN, K) matrix whose k-th column is the k-th target's virtual response."""
    cols = [virtual_steering(geom, d, r) for d, r in zip(scene.dod, scene.doa)]
    return np.column_stack(cols)


def signal_vector(scene: Scene, pulse: int) -> np.ndarray:
    """Per-target complex amplitudes at one pulse: sqrt(T) * rcs * Doppler phase."""
    if not (0 <= pulse < scene.pulses):
        raise IndexError(f"pulse index {pulse} outside [0, {scene.pulses})")
    amp = math.sqrt(scene.snapshots_per_pulse)
    phases = np.exp(2j * math.pi * np.asarray(scene.doppler) * pulse)
    return amp * np.asarray(scene.rcs) * phases


def signal_block(scene: Scene) -> np.ndarray:
    """(L, K) signal amplitudes for all pulses."""
    return np.array([signal_vector(scene, l) for l in range(scene.pulses)])


def synthesize(geom: ArrayGeometry, scene: Scene, clutter_draws) -> ObservationBlock:
    """Observations A(theta) v(l) + n(l) from the given clutter realizations."""
    n = np.asarray(clutter_draws, dtype=complex)
    if n.shape != (scene.pulses, geom.virtual_size):
        raise ValueError(
            f"clutter_draws must have shape {(scene.pulses, geom.virtual_size)}, "
            f"got {n.shape}"
        )
    a = steering_matrix(geom, scene)
    v = signal_block(scene)
    return ObservationBlock(v @ a.T + n)


def _mean_signal_power(geom: ArrayGeometry, scene: Scene) -> float:
    a = steering_matrix(geom, scene)
    v = signal_block(scene)
    return float(np.mean(np.sum(np.abs(v @ a.T) ** 2, axis=1)))


def scr_db(geom: ArrayGeometry, scene: Scene, clutter: "_clutter.ClutterModel") -> float:
    """Signal-to-clutter ratio in dB: mean signal power over mean clutter power."""
    mean_tau = _clutter.texture_mean(clutter.texture)
    denom = mean_tau * float(np.trace(clutter.speckle_cov).real)
    return 10.0 * math.log10(_mean_signal_power(geom, scene) / denom)


def speckle_power_for_scr(
    geom: ArrayGeometry,
    scene: Scene,
    clutter_template: "_clutter.ClutterModel",
    target_scr_db: float,
) -> float:
    """Power factor to apply to the trace-MN covariance template so the
    model hits ``target_scr_db``.

    The template is the clutter model's covariance normalized to trace MN;
    the returned factor multiplies it.  Feeding back the current SCR
    returns the current power factor trace(cov)/MN.
    """
    mean_tau = _clutter.texture_mean(clutter_template.texture)
    mn = clutter_template.speckle_cov.shape[0]
    s = _mean_signal_power(geom, scene)
    return s / (mean_tau * mn * 10.0 ** (target_scr_db / 10.0))
