"""Single-snapshot measurement model for linear arrays with element masks.

Positions are in wavelengths, so the steering phase of element ``n`` is
``2*pi*d_n*sin(theta)``. Masked-out elements stay in the vector as exact zeros.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FOV_DEG = (-30.0, 30.0)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ScanGrid:
    start: float = -30.0
    stop: float = 30.0
    step: float = 1.0

    def __post_init__(self):
        if self.step <= 0 or self.stop < self.start:
            raise ValueError(f"invalid scan grid {self.start}:{self.step}:{self.stop}")

    @property
    def angles_deg(self) -> np.ndarray:
        m = int(round((self.stop - self.start) / self.step)) + 1
        return self.start + self.step * np.arange(m)

    @property
    def size(self) -> int:
        return len(self.angles_deg)

    def index_of(self, angle_deg: float) -> int:
        """Index of the grid point nearest ``angle_deg`` (lower index on ties)."""
        offsets = np.abs(self.angles_deg - angle_deg)
        return int(np.argmin(offsets))

    def nearest(self, angles_deg) -> np.ndarray:
        idx = np.clip(np.rint((np.asarray(angles_deg) - self.start) / self.step), 0, self.size - 1)
        return self.start + self.step * idx


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Element positions (wavelengths, first element at 0) and an active mask."""

    positions: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        mask = np.ones(len(pos), dtype=np.int8) if self.mask is None else np.asarray(self.mask)
        if pos.ndim != 1 or len(pos) == 0:
            raise ValueError("positions must be a non-empty 1-D sequence")
        if pos[0] != 0.0:
            raise ValueError("positions[0] must be 0")
        if np.any(np.diff(pos) <= 0):
            raise ValueError("positions must be strictly increasing")
        if mask.shape != pos.shape:
            raise ValueError(f"mask length {mask.size} != {pos.size} positions")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if mask.sum() < 1:
            raise ValueError("at least one element must be active")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "mask", _frozen(mask.astype(np.int8)))

    @classmethod
    def ula(cls, n: int = 10, spacing: float = 0.5) -> "ArrayGeometry":
        return cls(spacing * np.arange(n))

    @property
    def n_elements(self) -> int:
        return len(self.positions)

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def with_mask(self, mask: Sequence[int]) -> "ArrayGeometry":
        return ArrayGeometry(self.positions, np.asarray(mask))

    def apply_mask(self, y: np.ndarray) -> np.ndarray:
        return np.where(self.mask.astype(bool), y, 0)

    def __eq__(self, other):
        if not isinstance(other, ArrayGeometry):
            return NotImplemented
        return np.array_equal(self.positions, other.positions) and np.array_equal(self.mask, other.mask)

    __hash__ = None


@dataclass(frozen=True)
class SourceScene:
    angles: tuple
    amplitudes: tuple
    phases: tuple
    snr_db: float

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        amps = tuple(float(a) for a in self.amplitudes)
        phases = tuple(float(p) for p in self.phases)
        if not len(angles) == len(amps) == len(phases):
            raise ValueError("angles, amplitudes and phases must have equal length")
        if len(angles) > 3:
            raise ValueError(f"at most 3 sources supported, got {len(angles)}")
        lo, hi = FOV_DEG
        if any(a < lo or a > hi for a in angles):
            raise ValueError(f"angles {angles} outside field of view {FOV_DEG}")
        if any(not 0.0 < a <= 1.0 for a in amps):
            raise ValueError(f"amplitudes must lie in (0, 1], got {amps}")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "snr_db", float(self.snr_db))

    @property
    def k(self) -> int:
        return len(self.angles)

    @property
    def coefficients(self) -> np.ndarray:
        return np.asarray(self.amplitudes) * np.exp(1j * np.asarray(self.phases))

    def __or__(self, other: "SourceScene") -> "SourceScene":
        if self.snr_db != other.snr_db:
            raise ValueError("can only merge scenes with the same SNR")
        return SourceScene(self.angles + other.angles, self.amplitudes + other.amplitudes,
                           self.phases + other.phases, self.snr_db)


@dataclass(frozen=True, eq=False)
class Snapshot:
    values: np.ndarray
    geometry: ArrayGeometry

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (self.geometry.n_elements,):
            raise ValueError(f"snapshot length {v.shape} != {self.geometry.n_elements} elements")
        object.__setattr__(self, "values", _frozen(v))


def steering_vector(geometry: ArrayGeometry, theta_deg) -> np.ndarray:
    """Unit-modulus array response; the mask is not applied.

    A scalar angle gives shape ``(N,)``; an array of angles gives ``(N, len)``.
    """
    theta = np.deg2rad(np.asarray(theta_deg, dtype=float))
    phase = 2 * np.pi * np.multiply.outer(geometry.positions, np.sin(theta))
    return np.exp(1j * phase)


def manifold(geometry: ArrayGeometry, grid: ScanGrid) -> np.ndarray:
    """N x M matrix whose m-th column is the steering vector at grid angle m."""
    return steering_vector(geometry, grid.angles_deg)


def noise_variance(snr_db: float) -> float:
    """Complex noise variance per element for a unit-amplitude reference source."""
    if np.isposinf(snr_db):
        return 0.0
    return float(10.0 ** (-snr_db / 10.0))


def complex_noise(n: int, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    # real and imaginary parts each carry sigma2/2
    scale = np.sqrt(sigma2 / 2.0)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def synthesize_snapshot(geometry: ArrayGeometry, scene: SourceScene,
                        rng: np.random.Generator | None = None) -> Snapshot:
    """y = sum_k a(theta_k) s_k + n, then zero the masked elements.

    ``scene.snr_db = inf`` yields a noiseless snapshot and ``rng`` may be None.
    """
    if scene.k == 0:
        raise ValueError("scene has no sources")
    y = steering_vector(geometry, np.asarray(scene.angles)) @ scene.coefficients
    sigma2 = noise_variance(scene.snr_db)
    if sigma2 > 0:
        if rng is None:
            raise ValueError("a random generator is required for noisy synthesis")
        y = y + complex_noise(geometry.n_elements, sigma2, rng)
    return Snapshot(geometry.apply_mask(y), geometry)


def sparsity(geometry: ArrayGeometry) -> float:
    return 1.0 - geometry.n_active / geometry.n_elements
