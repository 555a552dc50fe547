"""Shared fixtures: desk-scale trained models (cached) and the acceptance summary."""
import hashlib
import json
import os
import time
from dataclasses import asdict

import pytest

from sparsedoa import array_signal, dataset, features, network
from sparsedoa.array_signal import ArrayGeometry, ScanGrid, manifold
from sparsedoa.dataset import build_dataset
from sparsedoa.network import TrainConfig, load_checkpoint, save_checkpoint, train

# Desk-scale reproduction: 20,000 training samples and 50 epochs. Batch size,
# learning rate and precision are tuned for a single CPU core; see README.
DESK = {
    "train_count": 20_000,
    "val_per_snr": 200,
    "data_seed": 1,
    "train": {"epochs": 50, "batch_size": 128, "learning_rate": 1e-3, "seed": 1,
              "precision": "float32", "max_sparsity": 0.3},
}

ACCEPTANCE_LINES = []


def record(criterion: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def _cache_key() -> str:
    # settings plus the source of every module that shapes training
    h = hashlib.sha256(json.dumps(DESK, sort_keys=True).encode())
    for mod in (array_signal, dataset, features, network):
        with open(mod.__file__, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:16]


def _cache_dir(request) -> str:
    # SPARSEDOA_CACHE=0 forces a fresh training run
    path = str(request.config.cache.mkdir("sparsedoa-desk"))
    return path


@pytest.fixture(scope="session")
def desk_models(request):
    """Augmented and plain models trained identically at desk scale.

    Returns ``{"models": {"network": ..., "mlp": ...}, "seconds": {...}, "fresh": bool}``.
    Trained checkpoints are cached under pytest's cache directory keyed by the
    settings; ``seconds`` always reports the original training wall time.
    """
    key = _cache_key()
    root = _cache_dir(request)
    use_cache = os.environ.get("SPARSEDOA_CACHE", "1") != "0"
    meta_path = os.path.join(root, f"{key}.json")
    grid, geom = ScanGrid(), ArrayGeometry.ula()
    if use_cache and os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        models = {}
        for name, kind in (("network", "augmented"), ("mlp", "plain")):
            with open(os.path.join(root, f"{key}_{kind}.ckpt"), "rb") as fh:
                models[name] = load_checkpoint(fh.read())
        return {"models": models, "seconds": meta["seconds"], "fresh": False}

    t0 = time.perf_counter()
    ds = build_dataset(DESK["train_count"], DESK["val_per_snr"], seed=DESK["data_seed"])
    seconds = {"dataset": time.perf_counter() - t0}
    A = manifold(geom, grid)
    models = {}
    for name, kind in (("network", "augmented"), ("mlp", "plain")):
        cfg = TrainConfig(model=kind, **DESK["train"])
        result = train(ds, cfg, A)
        seconds[kind] = result.seconds
        models[name] = result.params
        with open(os.path.join(root, f"{key}_{kind}.ckpt"), "wb") as fh:
            fh.write(save_checkpoint(result.params))
    with open(meta_path, "w") as fh:
        json.dump({"seconds": seconds, "desk": DESK, "train_config": asdict(cfg)}, fh, indent=2)
    return {"models": models, "seconds": seconds, "fresh": True}
