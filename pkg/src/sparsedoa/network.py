"""DOA estimation MLP with hand-written backprop, Adam, BCE, and checkpoints.

Two model kinds share the six-layer trunk (2048-1024-512-256-128-M):

* ``augmented``: a sparse augmentation FC layer plus frequency embedding and
  position encoding feed the trunk (see :mod:`sparsedoa.features`).
* ``plain``: the packed snapshot ``[Re y; Im y]`` feeds the trunk directly.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import container
from .features import assemble_batch, pack_complex, sample_masks

log = logging.getLogger(__name__)


def fixed_blas():
    """One BLAS thread: threaded GEMM splits sums differently, which changes low bits."""
    return threadpool_limits(1)

TRUNK_WIDTHS = (2048, 1024, 512, 256, 128)
DEFAULT_HIDDEN = 384
CHECKPOINT_FORMAT = "sparsedoa-checkpoint"
CHECKPOINT_VERSION = 1
PROB_CLAMP = 1e-7


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


class ShapeMismatch(ValueError):
    pass


@dataclass(eq=False)
class ModelParams:
    kind: str
    n_elements: int
    grid_size: int
    hidden: int
    weights: list
    biases: list
    aug_weight: np.ndarray | None = None
    aug_bias: np.ndarray | None = None
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def input_width(self) -> int:
        return input_width(self.kind, self.n_elements, self.grid_size, self.hidden)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def tensors(self) -> list:
        head = [self.aug_weight, self.aug_bias] if self.kind == "augmented" else []
        return head + [t for wb in zip(self.weights, self.biases) for t in wb]

    def tensor_names(self) -> list:
        head = ["fc_aug.weight", "fc_aug.bias"] if self.kind == "augmented" else []
        return head + [f"fc_{i}.{p}" for i in range(1, 7) for p in ("weight", "bias")]

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        out.weights = [w.astype(dtype) for w in out.weights]
        out.biases = [b.astype(dtype) for b in out.biases]
        if out.kind == "augmented":
            out.aug_weight = out.aug_weight.astype(dtype)
            out.aug_bias = out.aug_bias.astype(dtype)
        return out


def input_width(kind: str, n_elements: int, grid_size: int, hidden: int) -> int:
    if kind == "augmented":
        return hidden + 4 * grid_size
    if kind == "plain":
        return 2 * n_elements
    raise ValueError(f"unknown model kind {kind!r}")


def layer_shapes(kind, n_elements, grid_size, hidden, trunk=TRUNK_WIDTHS):
    widths = [input_width(kind, n_elements, grid_size, hidden), *trunk, grid_size]
    return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]


def _he_uniform(rng, shape, dtype):
    limit = np.sqrt(6.0 / shape[1])
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(kind: str = "augmented", n_elements: int = 10, grid_size: int = 61,
                hidden: int = DEFAULT_HIDDEN, seed: int = 0, dtype=np.float64,
                trunk=TRUNK_WIDTHS) -> ModelParams:
    rng = np.random.default_rng([seed, 0])
    weights, biases = [], []
    aug_w = aug_b = None
    if kind == "augmented":
        aug_w = _he_uniform(rng, (hidden, 2 * n_elements), dtype)
        aug_b = np.zeros(hidden, dtype=dtype)
    for shape in layer_shapes(kind, n_elements, grid_size, hidden, trunk):
        weights.append(_he_uniform(rng, shape, dtype))
        biases.append(np.zeros(shape[0], dtype=dtype))
    return ModelParams(kind, n_elements, grid_size, hidden if kind == "augmented" else 0,
                       weights, biases, aug_w, aug_b, seed=seed)


def count_parameters(params: ModelParams) -> int:
    return int(sum(t.size for t in params.tensors()))


def count_for(kind: str, n_elements: int, grid_size: int, hidden: int) -> int:
    total = sum(o * i + o for o, i in layer_shapes(kind, n_elements, grid_size, hidden))
    if kind == "augmented":
        total += hidden * 2 * n_elements + hidden
    return total


def model_inputs(params: ModelParams, Y, masks, n_sla, A):
    """Trunk input for a batch of masked snapshots; returns ``(X, aug_cache)``."""
    Y = np.atleast_2d(Y)
    if Y.shape[1] != params.n_elements:
        raise ShapeMismatch(f"snapshot length {Y.shape[1]} != model's {params.n_elements}")
    if A.shape[1] != params.grid_size:
        raise ShapeMismatch(f"manifold has {A.shape[1]} grid points, model outputs {params.grid_size}")
    if params.kind == "augmented":
        return assemble_batch(Y, masks, n_sla, params.aug_weight, params.aug_bias, A,
                              dtype=params.dtype)
    return pack_complex(Y * np.atleast_2d(masks)).astype(params.dtype), None


def forward_logits(params: ModelParams, X: np.ndarray, keep: bool = False):
    X = np.atleast_2d(X)
    if X.shape[1] != params.input_width:
        raise ShapeMismatch(f"feature width {X.shape[1]} != model input {params.input_width}")
    acts = [X]
    a = X
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W.T + b
        a = z if i == last else np.maximum(z, 0)
        if keep:
            acts.append(a)
    return (a, acts) if keep else a


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    # large |z| rounds to exactly 0 or 1; stay inside the open interval
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, np.nextafter(out.dtype.type(1), out.dtype.type(0)), out=out)


def forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Sigmoid spectrum for one feature vector (M,) or a batch (B, M)."""
    features = np.asarray(features)
    p = sigmoid(forward_logits(params, features))
    return p[0] if features.ndim == 1 else p


def predict(params: ModelParams, Y, masks, n_sla, A) -> np.ndarray:
    X, _ = model_inputs(params, Y, masks, n_sla, A)
    return sigmoid(forward_logits(params, X))


def bce_with_logits(logits, target) -> np.ndarray:
    """Per-sample BCE averaged over bins, from logits (stable form)."""
    z = np.asarray(logits)
    t = np.asarray(target)
    per_bin = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return per_bin.mean(axis=-1)


def bce_loss(prediction, target) -> float:
    """Mean BCE over bins on probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(prediction, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs target {t.shape}")
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log1p(-p))))


def bce_logit_grad(logits, target) -> np.ndarray:
    """d(mean-over-bins BCE)/d(logit) = (sigmoid(z) - t) / M."""
    z = np.asarray(logits)
    return (sigmoid(z) - target) / z.shape[-1]


def backward(params: ModelParams, acts: list, dlogits: np.ndarray, aug_cache=None) -> list:
    """Gradients for every tensor, ordered as ``params.tensors()``."""
    grads = []
    d = dlogits
    n = len(params.weights)
    for i in range(n - 1, -1, -1):
        a_prev = acts[i]
        grads.append(d.sum(axis=0))
        grads.append(d.T @ a_prev)
        if i > 0 or params.kind == "augmented":
            d = d @ params.weights[i]
            if i > 0:
                d = d * (acts[i] > 0)
    grads.reverse()  # now [W1, b1, ..., W6, b6]
    if params.kind == "augmented":
        x_in, pre, n_sla = aug_cache
        d_branch = d[:, :params.hidden] / n_sla[:, None]
        d_pre = d_branch * (pre > 0)
        grads = [d_pre.T @ x_in, d_pre.sum(axis=0)] + grads
    return grads


class Adam:
    def __init__(self, tensors, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(t) for t in tensors]
        self.v = [np.zeros_like(t) for t in tensors]
        self._tmp = [np.empty_like(t) for t in tensors]
        self.t = 0

    def step(self, tensors, grads):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        # in-place to keep memory traffic down on multi-million-entry tensors
        for p, g, m, v, tmp in zip(tensors, grads, self.m, self.v, self._tmp):
            m *= b1
            np.multiply(g, 1 - b1, out=tmp)
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1 - b2
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1 / np.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            p -= tmp


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1024
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_sparsity: float = 0.3
    model: str = "augmented"
    hidden: int = DEFAULT_HIDDEN
    precision: str = "float64"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate >= 0:
            raise ValueError(f"invalid training config {self}")
        if self.model not in ("augmented", "plain"):
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        if not 0 <= self.max_sparsity < 1:
            raise ValueError("max_sparsity must lie in [0, 1)")


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int
    initial_val_loss: float
    seconds: float


def _mean_loss(params, Y, masks, n_sla, labels, A, batch=2048):
    total = 0.0
    for s in range(0, len(Y), batch):
        X, _ = model_inputs(params, Y[s:s + batch], masks[s:s + batch], n_sla[s:s + batch], A)
        total += float(bce_with_logits(forward_logits(params, X), labels[s:s + batch]).sum())
    return total / len(Y)


def train(dataset, config: TrainConfig, A: np.ndarray) -> TrainResult:
    """Mini-batch Adam on BCE, keeping the parameters with the lowest validation loss.

    ``dataset`` is a :class:`sparsedoa.dataset.LabeledDataset`; ``A`` the
    manifold the features are computed with. Augmented models draw a fresh
    mask for every sample in every epoch; validation masks are drawn once.
    """
    with fixed_blas():
        return _train(dataset, config, A)


def _train(dataset, config: TrainConfig, A: np.ndarray) -> TrainResult:
    dtype = np.dtype(config.precision)
    train_idx = np.flatnonzero(dataset.split == 0)
    val_idx = np.flatnonzero(dataset.split == 1)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("dataset needs both training and validation samples")
    n = dataset.n_elements
    Yt, Lt = dataset.snapshots[train_idx], dataset.labels[train_idx].astype(dtype)
    Yv, Lv = dataset.snapshots[val_idx], dataset.labels[val_idx].astype(dtype)
    augment = config.model == "augmented"

    if augment:
        val_masks = sample_masks(len(Yv), n, config.max_sparsity, np.random.default_rng([config.seed, 3]))
    else:
        val_masks = np.ones((len(Yv), n), dtype=np.int8)
    val_nsla = val_masks.sum(axis=1)

    params = init_params(config.model, n, dataset.grid_size, config.hidden, config.seed, dtype)
    tensors = params.tensors()
    opt = Adam(tensors, config.learning_rate, (config.beta1, config.beta2), config.adam_eps)

    t0 = time.perf_counter()
    initial = _mean_loss(params, Yv, val_masks, val_nsla, Lv, A)
    # selection runs over trained epochs only, so best_epoch is the argmin of the logged column
    best, best_loss, best_epoch = None, np.inf, 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(Yt))
        if augment:
            masks = sample_masks(len(Yt), n, config.max_sparsity,
                                 np.random.default_rng([config.seed, 1, epoch]))
        else:
            masks = np.ones((len(Yt), n), dtype=np.int8)
        running = 0.0
        for b, s in enumerate(range(0, len(Yt), config.batch_size)):
            idx = order[s:s + config.batch_size]
            X, cache = model_inputs(params, Yt[idx], masks[idx], masks[idx].sum(axis=1), A)
            logits, acts = forward_logits(params, X, keep=True)
            loss = bce_with_logits(logits, Lt[idx])
            batch_loss = float(loss.mean())
            if not np.isfinite(batch_loss):
                raise TrainingAborted(epoch, b, batch_loss)
            running += float(loss.sum())
            dlogits = bce_logit_grad(logits, Lt[idx]) / len(idx)
            opt.step(tensors, backward(params, acts, dlogits, cache))
        val_loss = _mean_loss(params, Yv, val_masks, val_nsla, Lv, A)
        if not np.isfinite(val_loss):
            raise TrainingAborted(epoch, -1, val_loss)
        history.append({"epoch": epoch, "train_loss": running / len(Yt), "val_loss": val_loss})
        if val_loss < best_loss:
            best, best_loss, best_epoch = params.copy(), val_loss, epoch
        log.info("epoch %d train %.5f val %.5f", epoch, running / len(Yt), val_loss)
    seconds = time.perf_counter() - t0
    best.metadata = {
        "best_epoch": best_epoch,
        "best_val_loss": best_loss,
        "initial_val_loss": initial,
        "train_config": asdict(config),
    }
    return TrainResult(best, history, best_epoch, initial, seconds)


def save_checkpoint(params: ModelParams) -> bytes:
    tensors = params.tensors()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "n_elements": params.n_elements,
        "grid_size": params.grid_size,
        "hidden": params.hidden,
        "seed": params.seed,
        "precision": str(params.dtype),
        "tensors": [{"name": nm, "shape": list(t.shape)} for nm, t in zip(params.tensor_names(), tensors)],
        "parameter_count": count_parameters(params),
        "metadata": params.metadata,
    }
    payload = np.concatenate([t.astype(np.float64).ravel() for t in tensors])
    return container.pack(header, payload)


def load_checkpoint(blob: bytes, expected_grid_size: int | None = None,
                    expected_elements: int | None = None) -> ModelParams:
    header, payload = container.unpack(blob, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    shapes = [tuple(t["shape"]) for t in header["tensors"]]
    expected = sum(int(np.prod(s)) for s in shapes)
    if header["parameter_count"] != expected or payload.size != expected:
        raise container.ContainerError(
            f"manifest declares {header['parameter_count']} parameters, tensor shapes give "
            f"{expected}, payload holds {payload.size}")
    if expected_grid_size is not None and header["grid_size"] != expected_grid_size:
        raise ShapeMismatch(f"checkpoint outputs {header['grid_size']} grid points, "
                            f"evaluator expects {expected_grid_size}")
    if expected_elements is not None and header["n_elements"] != expected_elements:
        raise ShapeMismatch(f"checkpoint expects {header['n_elements']} elements, got {expected_elements}")
    dtype = np.dtype(header["precision"])
    arrays, off = [], 0
    for s in shapes:
        k = int(np.prod(s))
        arrays.append(payload[off:off + k].reshape(s).astype(dtype))
        off += k
    kind = header["kind"]
    aug_w = aug_b = None
    if kind == "augmented":
        aug_w, aug_b, arrays = arrays[0], arrays[1], arrays[2:]
    params = ModelParams(kind, header["n_elements"], header["grid_size"], header["hidden"],
                         arrays[0::2], arrays[1::2], aug_w, aug_b, seed=header["seed"],
                         metadata=header["metadata"])
    want = layer_shapes(kind, params.n_elements, params.grid_size, params.hidden,
                        tuple(w.shape[0] for w in params.weights[:-1]))
    if [w.shape for w in params.weights] != want:
        raise ShapeMismatch("checkpoint layer shapes do not chain")
    return params


def history_csv(history: list) -> str:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{h['epoch']},{h['train_loss']!r},{h['val_loss']!r}" for h in history]
    return "\n".join(lines) + "\n"


def manifest_json(params: ModelParams) -> str:
    return json.dumps({"parameter_count": count_parameters(params), **params.metadata},
                      indent=2, sort_keys=True)
