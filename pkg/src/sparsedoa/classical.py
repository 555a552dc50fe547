"""Beamforming (DBF) and iterative adaptive approach (IAA) spectra, plus peak search."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .array_signal import ScanGrid, Snapshot, manifold

IAA_LOADING = 1e-9


class DegenerateArrayError(ValueError):
    pass


class IAAError(np.linalg.LinAlgError):
    def __init__(self, iteration: int, msg: str = "singular covariance"):
        super().__init__(f"{msg} at IAA iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True, eq=False)
class Spectrum:
    values: np.ndarray
    grid: ScanGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.size,):
            raise ValueError(f"spectrum length {v.shape} != grid size {self.grid.size}")
        if np.any(v < 0):
            raise ValueError("spectrum values must be non-negative")
        object.__setattr__(self, "values", v)

    @property
    def argmax_angle(self) -> float:
        return float(self.grid.angles_deg[int(np.argmax(self.values))])


def dbf_power(Y: np.ndarray, A: np.ndarray, n_active) -> np.ndarray:
    """Matched-filter power |a_m^H y|^2 / N_SLA^2 for a batch of snapshots.

    ``Y`` is ``(B, N)`` with masked entries zero, ``A`` is ``(N, M)``.
    """
    Y = np.atleast_2d(Y)
    n_active = np.broadcast_to(np.asarray(n_active, dtype=float), (Y.shape[0],))
    if np.any(n_active < 1):
        raise DegenerateArrayError("no active elements")
    # einsum without BLAS keeps per-row results independent of batch size
    beam = np.einsum("bn,nm->bm", Y, A.conj())
    return np.abs(beam) ** 2 / n_active[:, None] ** 2


def dbf_spectrum(snapshot: Snapshot, grid: ScanGrid) -> Spectrum:
    y = snapshot.values
    if not np.any(y):
        raise DegenerateArrayError("all-zero snapshot")
    A = manifold(snapshot.geometry, grid)
    return Spectrum(dbf_power(y, A, snapshot.geometry.n_active)[0], grid)


def iaa_power(Y_act: np.ndarray, A_act: np.ndarray, max_iters: int = 15,
              loading: float = IAA_LOADING, return_noise: bool = False):
    """Single-snapshot IAA on compacted active subarrays.

    The model covariance is ``A diag(p) A^H + s2 I``. The white-noise power
    ``s2`` is refined alongside ``p``: the identity columns are treated as
    extra look directions and their IAA powers averaged. Without it the
    61-point +/-30 degree manifold of a 10-element array is close to rank
    deficient and noise outside its span blows up ``a^H R^-1 y``.

    Parameters
    ----------
    Y_act : (B, n) complex
        Active-element measurements only.
    A_act : (B, n, M) or (n, M) complex
        Manifold rows of the active elements.
    max_iters : int
        Number of refinements of the beamforming initialisation.

    Returns
    -------
    (B, M) array of power estimates (and the (B,) noise powers if asked).
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    Y_act = np.atleast_2d(Y_act)
    B, n = Y_act.shape
    if A_act.ndim == 2:
        A_act = np.broadcast_to(A_act, (B,) + A_act.shape)
    if not np.all(np.any(Y_act != 0, axis=1)):
        raise DegenerateArrayError("all-zero snapshot")
    M = A_act.shape[2]
    eye = np.eye(n)
    # look directions: grid steering vectors, then one unit vector per element
    dirs = np.concatenate([A_act, np.broadcast_to(eye, (B, n, n))], axis=2)
    dirs_h = dirs.conj()
    p = np.abs(np.einsum("bn,bnm->bm", Y_act, dirs_h[:, :, :M])) ** 2 / n ** 2
    s2 = np.mean(np.abs(Y_act) ** 2, axis=1)
    rhs = np.concatenate([Y_act[:, :, None], dirs], axis=2)
    for it in range(1, max_iters + 1):
        R = np.einsum("bnm,bm,bkm->bnk", A_act, p, dirs_h[:, :, :M])
        R = R + s2[:, None, None] * eye
        tr = np.einsum("bnn->b", R).real
        R = R + (loading * tr / n)[:, None, None] * eye
        try:
            X = np.linalg.solve(R, rhs)
        except np.linalg.LinAlgError as exc:
            raise IAAError(it) from exc
        num = np.abs(np.einsum("bnm,bn->bm", dirs_h, X[:, :, 0])) ** 2
        den = np.einsum("bnm,bnm->bm", dirs_h, X[:, :, 1:]).real
        if not np.all(np.isfinite(den)) or np.any(den <= 0):
            raise IAAError(it, "non-positive a^H R^-1 a")
        q = num / den ** 2
        p, s2 = q[:, :M], q[:, M:].mean(axis=1)
    return (p, s2) if return_noise else p


def iaa_spectrum(snapshot: Snapshot, grid: ScanGrid, max_iters: int = 15) -> Spectrum:
    g = snapshot.geometry
    act = g.active_indices
    A = manifold(g, grid)
    p = iaa_power(snapshot.values[act][None, :], A[act], max_iters)
    return Spectrum(p[0], grid)


def peak_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest strict local maxima, padded with the largest
    remaining bins when fewer maxima exist. Ties resolve to the lower index."""
    v = np.asarray(values, dtype=float)
    m = len(v)
    if not 1 <= k <= m:
        raise ValueError(f"k={k} outside [1, {m}]")
    left = np.r_[-np.inf, v[:-1]]
    right = np.r_[v[1:], -np.inf]
    peaks = np.flatnonzero((v > left) & (v > right))
    # stable sort on -value keeps ascending index among equal values
    peaks = peaks[np.argsort(-v[peaks], kind="stable")]
    chosen = list(peaks[:k])
    if len(chosen) < k:
        taken = set(chosen)
        for i in np.argsort(-v, kind="stable"):
            if i not in taken:
                chosen.append(i)
                if len(chosen) == k:
                    break
    return np.asarray(chosen, dtype=int)


def peak_search(spectrum: Spectrum, k: int) -> list[float]:
    idx = peak_indices(spectrum.values, k)
    return [float(a) for a in spectrum.grid.angles_deg[idx]]


def local_maxima(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    left = np.r_[-np.inf, v[:-1]]
    right = np.r_[v[1:], -np.inf]
    return np.flatnonzero((v > left) & (v > right))
