"""Sparse augmentation masks and the network's input features.

The fused feature vector for one snapshot is laid out as::

    [ signal branch (H) | Re A^H y | Im A^H y | Re A^H mask | Im A^H mask ]

where the signal branch is ``relu(W [Re y; Im y] + b) / N_SLA`` and both
projections are divided by ``N_SLA``. Total width is ``H + 4M``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AUTO_THRESHOLD = 1e-6


class DegenerateMaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseMask:
    flags: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.flags)
        if f.ndim != 1 or not np.all((f == 0) | (f == 1)):
            raise ValueError("mask flags must be a 1-D 0/1 vector")
        if f.sum() < 1:
            raise DegenerateMaskError("mask has no active elements")
        object.__setattr__(self, "flags", f.astype(np.int8))

    @property
    def active_count(self) -> int:
        return int(self.flags.sum())


def max_removed(n: int, max_sparsity: float) -> int:
    # guard against 0.3 * 10 = 2.9999...
    return int(math.floor(max_sparsity * n + 1e-9))


def sample_mask(n: int, max_sparsity: float, rng: np.random.Generator) -> SparseMask:
    """Zero a uniformly drawn number (0..floor(s*n)) of uniformly chosen elements."""
    if n < 1 or not 0.0 <= max_sparsity < 1.0:
        raise ValueError(f"need n >= 1 and 0 <= max_sparsity < 1, got {n}, {max_sparsity}")
    z = int(rng.integers(0, max_removed(n, max_sparsity) + 1))
    flags = np.ones(n, dtype=np.int8)
    flags[rng.choice(n, size=z, replace=False)] = 0
    return SparseMask(flags)


def sample_masks(count: int, n: int, max_sparsity: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised ``sample_mask`` for ``count`` independent masks, shape (count, n)."""
    if n < 1 or not 0.0 <= max_sparsity < 1.0:
        raise ValueError(f"need n >= 1 and 0 <= max_sparsity < 1, got {n}, {max_sparsity}")
    z = rng.integers(0, max_removed(n, max_sparsity) + 1, size=count)
    # rank of iid uniforms is a uniform random permutation
    ranks = np.argsort(np.argsort(rng.random((count, n)), axis=1), axis=1)
    return (ranks >= z[:, None]).astype(np.int8)


def fixed_removal_mask(n: int, n_removed: int, rng: np.random.Generator) -> np.ndarray:
    """Mask with exactly ``n_removed`` elements zeroed at uniform positions."""
    flags = np.ones(n, dtype=np.int8)
    flags[rng.choice(n, size=n_removed, replace=False)] = 0
    return flags


def threshold_mask(y: np.ndarray, rel: float = AUTO_THRESHOLD) -> np.ndarray:
    """Active flags for entries with |y_i| > rel * max|y|."""
    mag = np.abs(np.asarray(y))
    peak = mag.max(axis=-1, keepdims=True)
    if np.any(peak == 0):
        raise DegenerateMaskError("all-zero snapshot")
    return (mag > rel * peak).astype(np.int8)


def normalize_by_active(x, n_sla):
    n_sla = np.asarray(n_sla)
    if np.any(n_sla < 1):
        raise DegenerateMaskError("active count must be >= 1")
    return np.asarray(x) / n_sla


def frequency_embed(x: np.ndarray, A: np.ndarray, n_sla) -> np.ndarray:
    """A^H x / N_SLA. ``x`` may be (N,) or (B, N); ``n_sla`` scalar or (B,)."""
    x = np.asarray(x)
    if x.shape[-1] != A.shape[0]:
        raise ValueError(f"input length {x.shape[-1]} != manifold rows {A.shape[0]}")
    n_sla = np.asarray(n_sla, dtype=float)
    if np.any(n_sla < 1):
        raise DegenerateMaskError("active count must be >= 1")
    out = np.einsum("...n,nm->...m", x, A.conj())
    return out / (n_sla[..., None] if n_sla.ndim else n_sla)


def position_encode(mask: SparseMask, A: np.ndarray) -> np.ndarray:
    return frequency_embed(mask.flags.astype(float), A, mask.active_count)


def pack_complex(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    return np.concatenate([y.real, y.imag], axis=-1)


def assemble_batch(Y: np.ndarray, masks: np.ndarray, n_sla: np.ndarray,
                   weight: np.ndarray, bias: np.ndarray, A: np.ndarray,
                   dtype=np.float64):
    """Fused features for a batch.

    Returns ``(features, cache)``; ``cache`` holds what backprop through the
    signal branch needs (packed input and the pre-activation).
    """
    Y = np.atleast_2d(Y)
    masks = np.atleast_2d(masks)
    H, width = weight.shape
    if width != 2 * Y.shape[1] or bias.shape != (H,):
        raise ValueError(f"augmentation layer shape {weight.shape}/{bias.shape} "
                         f"incompatible with {Y.shape[1]}-element input")
    n_sla = np.asarray(n_sla, dtype=float)
    if np.any(n_sla < 1):
        raise DegenerateMaskError("active count must be >= 1")
    Y = Y * masks
    x_in = pack_complex(Y).astype(dtype)
    pre = x_in @ weight.T + bias
    branch = np.maximum(pre, 0) / n_sla[:, None].astype(dtype)
    emb = frequency_embed(Y, A, n_sla)
    pos = frequency_embed(masks.astype(float), A, n_sla)
    feats = np.concatenate([branch, emb.real, emb.imag, pos.real, pos.imag], axis=1).astype(dtype)
    return feats, (x_in, pre, n_sla)


def assemble_features(masked_snapshot, mask: SparseMask, weight: np.ndarray,
                      bias: np.ndarray, A: np.ndarray) -> np.ndarray:
    y = getattr(masked_snapshot, "values", masked_snapshot)
    feats, _ = assemble_batch(np.asarray(y)[None, :], mask.flags[None, :],
                              np.array([mask.active_count]), weight, bias, A)
    return feats[0]
