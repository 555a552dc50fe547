"""Labelled training data, its on-disk container, and real-measurement import."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container
from .array_signal import (ArrayGeometry, ScanGrid, SourceScene, complex_noise, noise_variance,
                           steering_vector)
from .features import threshold_mask

DATASET_FORMAT = "sparsedoa-dataset"
REAL_FORMAT = "sparsedoa-real"
FORMAT_VERSION = 1
REFERENCE_SNRS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
MAX_SOURCES = 3
GEN_CHUNK = 2000
# per-sample scene row: split, K, snr, angles[3], amplitudes[3], phases[3]
SCENE_COLUMNS = 3 + 3 * MAX_SOURCES


@dataclass(eq=False)
class LabeledDataset:
    snapshots: np.ndarray          # (S, N) complex, full ULA, unmasked
    labels: np.ndarray             # (S, M)
    k: np.ndarray                  # (S,)
    angles: np.ndarray             # (S, 3), zero-padded beyond k
    amplitudes: np.ndarray
    phases: np.ndarray
    snr_db: np.ndarray             # (S,)
    split: np.ndarray              # (S,) 0 = train, 1 = validation
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        s = len(self.snapshots)
        for name in ("labels", "k", "angles", "amplitudes", "phases", "snr_db", "split"):
            if len(getattr(self, name)) != s:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {s}")

    def __len__(self):
        return len(self.snapshots)

    @property
    def n_elements(self) -> int:
        return self.snapshots.shape[1]

    @property
    def grid_size(self) -> int:
        return self.labels.shape[1]

    def scene(self, i: int) -> SourceScene:
        k = int(self.k[i])
        return SourceScene(self.angles[i, :k], self.amplitudes[i, :k], self.phases[i, :k],
                           float(self.snr_db[i]))

    @property
    def scenes(self) -> list:
        return [self.scene(i) for i in range(len(self))]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.snapshots[idx], self.labels[idx], self.k[idx], self.angles[idx],
                              self.amplitudes[idx], self.phases[idx], self.snr_db[idx],
                              self.split[idx], dict(self.manifest))


def label_vector(scene: SourceScene, grid: ScanGrid) -> np.ndarray:
    """Grid label: source amplitude at each on-grid source angle, zero elsewhere."""
    out = np.zeros(grid.size)
    g = grid.angles_deg
    for angle, amp in zip(scene.angles, scene.amplitudes):
        hit = np.flatnonzero(np.isclose(g, angle, rtol=0, atol=1e-9))
        if hit.size:
            out[hit[0]] = amp
    return out


def decode_label(label: np.ndarray, grid: ScanGrid) -> tuple[np.ndarray, np.ndarray]:
    idx = np.flatnonzero(label)
    return grid.angles_deg[idx], label[idx]


def _draw_sample(rng, grid, k_range, amp_range, snr):
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    idx = np.sort(rng.choice(grid.size, size=k, replace=False))
    amps = rng.uniform(amp_range[0], amp_range[1], size=k)
    phases = rng.uniform(0.0, 2 * np.pi, size=k)
    return grid.angles_deg[idx], amps, phases


def _generate_rows(args):
    """Samples ``start:stop``; each depends only on ``(seed, stream, index)``."""
    (seed, stream, count, snr_levels, snr_cycle, grid, geometry, k_range, amplitude_range), start, stop = args
    rows = stop - start
    n, m = geometry.n_elements, grid.size
    snaps = np.zeros((rows, n), dtype=complex)
    labels = np.zeros((rows, m))
    ks = np.zeros(rows, dtype=int)
    angles = np.zeros((rows, MAX_SOURCES))
    amps = np.zeros((rows, MAX_SOURCES))
    phases = np.zeros((rows, MAX_SOURCES))
    snrs = np.zeros(rows)
    block = -(-count // len(snr_levels))
    for r, i in enumerate(range(start, stop)):
        rng = np.random.default_rng([seed, stream, i])
        if snr_cycle:
            snr = snr_levels[i // block]
        else:
            snr = snr_levels[int(rng.integers(len(snr_levels)))]
        a, s_amp, s_ph = _draw_sample(rng, grid, k_range, amplitude_range, snr)
        k = len(a)
        y = steering_vector(geometry, a) @ (s_amp * np.exp(1j * s_ph))
        sigma2 = noise_variance(snr)
        if sigma2 > 0:
            y = y + complex_noise(n, sigma2, rng)
        snaps[r] = y
        labels[r, np.searchsorted(grid.angles_deg, a)] = s_amp
        ks[r], snrs[r] = k, snr
        angles[r, :k], amps[r, :k], phases[r, :k] = a, s_amp, s_ph
    return snaps, labels, ks, angles, amps, phases, snrs


def generate_dataset(count: int, snr_levels_db=REFERENCE_SNRS, k_range=(1, 3),
                     grid: ScanGrid | None = None, seed: int = 0,
                     geometry: ArrayGeometry | None = None, amplitude_range=(0.5, 1.0),
                     stream: int = 0, snr_cycle: bool = False, split: int = 0,
                     workers: int = 1) -> LabeledDataset:
    """Random on-grid scenes with full-array snapshots and grid labels.

    Each sample uses its own generator seeded from ``(seed, stream, index)``.
    SNRs are drawn uniformly from ``snr_levels_db`` or, with ``snr_cycle``,
    assigned in equal-sized consecutive blocks per level. ``workers > 1``
    spreads fixed-size chunks over processes without changing the output.
    """
    grid = grid or ScanGrid()
    geometry = geometry or ArrayGeometry.ula()
    snr_levels = [float(s) for s in snr_levels_db]
    if count < 1 or not snr_levels:
        raise ValueError("count must be >= 1 and snr_levels non-empty")
    lo, hi = k_range
    if not 1 <= lo <= hi <= MAX_SOURCES or hi > grid.size:
        raise ValueError(f"k_range {k_range} not satisfiable on a {grid.size}-point grid")

    job = (seed, stream, count, snr_levels, snr_cycle, grid, geometry, tuple(k_range),
           tuple(amplitude_range))
    bounds = [(s, min(s + GEN_CHUNK, count)) for s in range(0, count, GEN_CHUNK)]
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_generate_rows, [(job, a, b) for a, b in bounds]))
    else:
        parts = [_generate_rows((job, a, b)) for a, b in bounds]
    snaps, labels, ks, angles, amps, phases, snrs = (np.concatenate(col) for col in zip(*parts))
    manifest = {
        "seed": seed,
        "stream": stream,
        "count": count,
        "snr_levels_db": snr_levels,
        "k_range": list(k_range),
        "amplitude_range": list(amplitude_range),
        "grid": {"start": grid.start, "stop": grid.stop, "step": grid.step},
        "positions": geometry.positions.tolist(),
    }
    return LabeledDataset(snaps, labels, ks, angles, amps, phases, snrs,
                          np.full(count, split, dtype=np.int8), manifest)


def concat(parts: list, manifest: dict) -> LabeledDataset:
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return LabeledDataset(cat("snapshots"), cat("labels"), cat("k"), cat("angles"),
                          cat("amplitudes"), cat("phases"), cat("snr_db"), cat("split"), manifest)


def build_dataset(train_count: int, val_per_snr: int, snr_levels_db=REFERENCE_SNRS,
                  seed: int = 0, grid: ScanGrid | None = None,
                  geometry: ArrayGeometry | None = None, k_range=(1, 3),
                  amplitude_range=(0.5, 1.0), workers: int = 1) -> LabeledDataset:
    """Training split with random SNRs plus ``val_per_snr`` validation samples per level."""
    grid = grid or ScanGrid()
    geometry = geometry or ArrayGeometry.ula()
    common = dict(snr_levels_db=snr_levels_db, k_range=k_range, grid=grid, seed=seed,
                  geometry=geometry, amplitude_range=amplitude_range, workers=workers)
    tr = generate_dataset(train_count, stream=0, split=0, **common)
    va = generate_dataset(val_per_snr * len(snr_levels_db), stream=1, split=1, snr_cycle=True, **common)
    manifest = dict(tr.manifest)
    manifest.pop("stream")
    manifest.update(count=train_count + len(va), n_train=train_count, n_val=len(va),
                    val_per_snr=val_per_snr)
    return concat([tr, va], manifest)


def save_dataset(ds: LabeledDataset) -> bytes:
    table = np.column_stack([ds.split, ds.k, ds.snr_db, ds.angles, ds.amplitudes, ds.phases])
    for name, arr in (("snapshots", ds.snapshots), ("labels", ds.labels), ("scenes", table)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")
    header = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "n_elements": ds.n_elements,
        "grid_size": ds.grid_size,
        "count": len(ds),
        "layout": ["snapshots[count,n_elements,(re,im)]", "labels[count,grid_size]",
                   f"scenes[count,{SCENE_COLUMNS}]"],
        "manifest": ds.manifest,
    }
    interleaved = np.stack([ds.snapshots.real, ds.snapshots.imag], axis=-1)
    payload = np.concatenate([interleaved.ravel(), ds.labels.ravel(), table.ravel()])
    return container.pack(header, payload)


def load_dataset(blob: bytes) -> LabeledDataset:
    header, payload = container.unpack(blob, DATASET_FORMAT, FORMAT_VERSION)
    s, n, m = header["count"], header["n_elements"], header["grid_size"]
    sizes = [s * n * 2, s * m, s * SCENE_COLUMNS]
    if payload.size != sum(sizes):
        raise container.ContainerError(
            f"dataset of {s} samples needs {8 * sum(sizes)} payload bytes, got {8 * payload.size}")
    if not np.all(np.isfinite(payload)):
        raise container.ContainerError("dataset payload contains non-finite values")
    raw, labels, table = np.split(payload, np.cumsum(sizes)[:-1])
    raw = raw.reshape(s, n, 2)
    table = table.reshape(s, SCENE_COLUMNS)
    k3 = MAX_SOURCES
    return LabeledDataset(
        raw[..., 0] + 1j * raw[..., 1], labels.reshape(s, m), table[:, 1].astype(int),
        table[:, 3:3 + k3], table[:, 3 + k3:3 + 2 * k3], table[:, 3 + 2 * k3:],
        table[:, 2], table[:, 0].astype(np.int8), header["manifest"])


def superpose_measurements(vectors) -> np.ndarray:
    vecs = [np.asarray(v, dtype=complex) for v in vectors]
    if not vecs:
        raise ValueError("need at least one vector")
    if len({v.shape for v in vecs}) != 1:
        raise ValueError(f"length mismatch: {[v.shape for v in vecs]}")
    return np.sum(vecs, axis=0)


@dataclass(eq=False)
class RealRecords:
    snapshots: np.ndarray    # (R, N) complex
    angles_deg: np.ndarray   # (R,)
    n_active: np.ndarray     # (R,) from thresholding
    header: dict


def export_real(snapshots, angles_deg, meta: dict | None = None) -> bytes:
    snaps = np.atleast_2d(np.asarray(snapshots, dtype=complex))
    header = {
        "format": REAL_FORMAT,
        "version": FORMAT_VERSION,
        "n_elements": snaps.shape[1],
        "records": [{"angle_deg": float(a)} for a in angles_deg],
        "meta": meta or {},
    }
    return container.pack(header, np.stack([snaps.real, snaps.imag], axis=-1).ravel())


def import_real(blob: bytes) -> RealRecords:
    """Validate a real-measurement file and infer active counts by thresholding."""
    header, payload = container.unpack(blob, REAL_FORMAT, FORMAT_VERSION)
    n = header.get("n_elements")
    records = header.get("records")
    if not isinstance(n, int) or n < 1 or not isinstance(records, list):
        raise container.ContainerError("real-data header needs integer n_elements and a records list")
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or not isinstance(rec.get("angle_deg"), (int, float)):
            raise container.ContainerError(f"record {i} lacks a numeric angle_deg")
    if payload.size != len(records) * n * 2:
        raise container.ContainerError(
            f"{len(records)} records of {n} elements need {16 * len(records) * n} payload bytes, "
            f"got {8 * payload.size}")
    raw = payload.reshape(len(records), n, 2)
    bad = np.flatnonzero(~np.all(np.isfinite(raw), axis=(1, 2)))
    if bad.size:
        raise container.ContainerError(f"record {int(bad[0])} contains non-finite values")
    snaps = raw[..., 0] + 1j * raw[..., 1]
    if np.any(np.all(snaps == 0, axis=1)):
        raise container.ContainerError(
            f"record {int(np.flatnonzero(np.all(snaps == 0, axis=1))[0])} is all zeros")
    n_active = threshold_mask(snaps).sum(axis=1)
    angles = np.array([float(r["angle_deg"]) for r in records])
    return RealRecords(snaps, angles, n_active, header)


def synthesize_real(n_records: int = 195, geometry: ArrayGeometry | None = None,
                    snr_db: float = 30.0, seed: int = 0) -> bytes:
    """Schema-conformant stand-in for a corner-reflector sweep: one target per record,
    angles evenly spread over the field of view, random phase."""
    geometry = geometry or ArrayGeometry.ula()
    angles = np.linspace(-30.0, 30.0, n_records)
    snaps = np.zeros((n_records, geometry.n_elements), dtype=complex)
    for i, a in enumerate(angles):
        rng = np.random.default_rng([seed, 7, i])
        y = steering_vector(geometry, a) * np.exp(1j * rng.uniform(0, 2 * np.pi))
        snaps[i] = y + complex_noise(geometry.n_elements, noise_variance(snr_db), rng)
    return export_real(snaps, angles, {"synthetic": True, "snr_db": snr_db, "seed": seed})
