"""Monte-Carlo benchmarks: MSE vs SNR, hit rate vs separation, timing, showcase.

Every trial draws from its own generator seeded with ``(seed, trial_index)``,
so the same trial index sees the same array mask, angles, phases and noise for
every estimator. Trials are processed in fixed-size chunks; results are
concatenated in chunk order, so reports do not depend on the worker count.
"""
from __future__ import annotations

import io
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np

from .array_signal import ArrayGeometry, ScanGrid, complex_noise, manifold, noise_variance, steering_vector
from .classical import dbf_power, iaa_power, local_maxima, peak_indices
from .features import fixed_removal_mask
from .network import ShapeMismatch, count_parameters, fixed_blas, predict

GRID_FLOOR = 1.0 / 12.0
HIT_TOLERANCE_DEG = 1.0
CLASSICAL = ("oracle", "dbf", "iaa")
SCENARIOS = ("single", "two_target", "symmetric")
TWO_TARGET_INTERVALS = ((-0.6, 0.4), (9.6, 10.4))


@dataclass(frozen=True)
class TrialSpec:
    estimator: str
    geometry: str = "ula"
    sparsity: float = 0.3
    scenario: str = "single"
    snr_db: float = 30.0
    trials: int = 5000
    seed: int = 0
    delta_theta: float | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.geometry not in ("ula", "sla"):
            raise ValueError(f"geometry policy must be 'ula' or 'sla', got {self.geometry!r}")
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "symmetric" and not (self.delta_theta and self.delta_theta > 0):
            raise ValueError("symmetric scenario needs delta_theta > 0")

    @property
    def k(self) -> int:
        return 1 if self.scenario == "single" else 2


@dataclass(eq=False)
class EvalContext:
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry.ula)
    grid: ScanGrid = field(default_factory=ScanGrid)
    models: dict = field(default_factory=dict)
    iaa_iters: int = 15
    chunk_size: int = 500
    workers: int = 1

    def __post_init__(self):
        for name, params in self.models.items():
            if params.grid_size != self.grid.size:
                raise ShapeMismatch(f"model {name!r} outputs {params.grid_size} bins, "
                                    f"grid has {self.grid.size}")
            if params.n_elements != self.geometry.n_elements:
                raise ShapeMismatch(f"model {name!r} expects {params.n_elements} elements")

    @cached_property
    def A(self) -> np.ndarray:
        return manifold(self.geometry, self.grid)

    @property
    def estimators(self) -> tuple:
        return CLASSICAL + tuple(self.models)

    def check(self, estimator: str):
        if estimator not in self.estimators:
            raise KeyError(f"estimator {estimator!r} unavailable; have {self.estimators}")


def _draw_angles(spec: TrialSpec, rng) -> np.ndarray:
    if spec.scenario == "single":
        return rng.uniform(-30.0, 30.0, size=1)
    if spec.scenario == "two_target":
        return np.array([rng.uniform(*iv) for iv in TWO_TARGET_INTERVALS])
    half = spec.delta_theta / 2.0
    return np.array([-half, half])


def draw_trial(spec: TrialSpec, ctx: EvalContext, index: int):
    """Replay one trial: ``(true angles, masked snapshot, mask)``."""
    rng = np.random.default_rng([spec.seed, index])
    n = ctx.geometry.n_elements
    if spec.geometry == "sla":
        mask = fixed_removal_mask(n, int(round(spec.sparsity * n)), rng)
    else:
        mask = ctx.geometry.mask.copy()
    angles = _draw_angles(spec, rng)
    phases = rng.uniform(0.0, 2 * np.pi, size=len(angles))
    y = steering_vector(ctx.geometry, angles) @ np.exp(1j * phases)
    sigma2 = noise_variance(spec.snr_db)
    if sigma2 > 0:
        y = y + complex_noise(n, sigma2, rng)
    return angles, y * mask, mask


def estimator_spectra(estimator: str, Y: np.ndarray, masks: np.ndarray, ctx: EvalContext) -> np.ndarray:
    """(B, M) spectra for a batch of masked snapshots."""
    ctx.check(estimator)
    n_sla = masks.sum(axis=1)
    if estimator == "dbf":
        return dbf_power(Y, ctx.A, n_sla)
    if estimator == "iaa":
        out = np.empty((len(Y), ctx.grid.size))
        for n_act in np.unique(n_sla):
            rows = np.flatnonzero(n_sla == n_act)
            act = np.nonzero(masks[rows])[1].reshape(len(rows), n_act)
            Y_act = np.take_along_axis(Y[rows], act, axis=1)
            out[rows] = iaa_power(Y_act, ctx.A[act], ctx.iaa_iters)
        return out
    if estimator == "oracle":
        raise ValueError("the oracle has no spectrum")
    return predict(ctx.models[estimator], Y, masks, n_sla, ctx.A)


def assign(estimates, truths) -> np.ndarray:
    """Signed errors under the estimate-to-truth pairing with least total squared error."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(len(est)), len(tru)):
        err = est[list(perm)] - tru
        cost = float(np.sum(err ** 2))
        if cost < best_cost:
            best, best_cost = err, cost
    return best


def _run_chunk(args):
    with fixed_blas():
        return _chunk_errors(*args)


def _chunk_errors(spec, ctx, start, stop):
    truths, Y, masks = zip(*(draw_trial(spec, ctx, i) for i in range(start, stop)))
    truths = np.array(truths)
    if spec.estimator == "oracle":
        estimates = ctx.grid.nearest(truths)
    else:
        spectra = estimator_spectra(spec.estimator, np.array(Y), np.array(masks), ctx)
        estimates = np.array([ctx.grid.angles_deg[peak_indices(s, spec.k)] for s in spectra])
    errors = np.array([assign(e, t) for e, t in zip(estimates, truths)])
    return errors


def run_trials(spec: TrialSpec, ctx: EvalContext) -> np.ndarray:
    """Signed angle errors, shape (trials, K), in trial order."""
    ctx.check(spec.estimator)
    bounds = [(s, min(s + ctx.chunk_size, spec.trials)) for s in range(0, spec.trials, ctx.chunk_size)]
    tasks = [(spec, ctx, a, b) for a, b in bounds]
    if ctx.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=ctx.workers) as pool:
            parts = list(pool.map(_run_chunk, tasks))
    else:
        parts = [_run_chunk(t) for t in tasks]
    return np.concatenate(parts)


def _condition(spec: TrialSpec) -> dict:
    d = asdict(spec)
    if d["geometry"] == "ula":
        d["sparsity"] = 0.0
    return d


def _binomial_ci(hits: int, n: int, z: float = 1.96) -> list:
    # Wilson interval
    p = hits / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return [float(max(0.0, centre - half)), float(min(1.0, centre + half))]


def summarize(spec: TrialSpec, errors: np.ndarray) -> dict:
    per_trial = np.mean(errors ** 2, axis=1)
    mse = float(per_trial.mean())
    se = float(per_trial.std(ddof=1) / np.sqrt(len(per_trial))) if len(per_trial) > 1 else 0.0
    hits = int(np.sum(np.all(np.abs(errors) <= HIT_TOLERANCE_DEG + 1e-9, axis=1)))
    n = len(errors)
    rate = hits / n
    return {
        **_condition(spec),
        "mse": mse,
        "mse_se": se,
        "mse_ci95": [mse - 1.96 * se, mse + 1.96 * se],
        "hit_rate": rate,
        "hit_se": float(np.sqrt(rate * (1 - rate) / n)),
        "hit_ci95": _binomial_ci(hits, n),
    }


def mse_accuracy(spec: TrialSpec, ctx: EvalContext) -> dict:
    return summarize(spec, run_trials(spec, ctx))


def hit_rate(spec: TrialSpec, delta_thetas, ctx: EvalContext) -> list:
    out = []
    for dt in delta_thetas:
        if dt <= 0:
            raise ValueError("angular separations must be positive")
        s = replace(spec, scenario="symmetric", delta_theta=float(dt))
        out.append(summarize(s, run_trials(s, ctx)))
    return out


def accuracy_sweep(estimators, geometries, scenario, snr_levels, trials, seed, ctx,
                   sparsity=0.3) -> list:
    """MSE rows for every (estimator, SNR, geometry), plus grid-floor rows."""
    rows = []
    for geom in geometries:
        floor = summarize(TrialSpec("oracle", geom, sparsity, scenario, float("inf"), trials, seed),
                          run_trials(TrialSpec("oracle", geom, sparsity, scenario, float("inf"),
                                               trials, seed), ctx))
        for snr in snr_levels:
            rows.append({**floor, "estimator": "grid_floor", "snr_db": float(snr)})
            for est in estimators:
                spec = TrialSpec(est, geom, sparsity, scenario, float(snr), trials, seed)
                rows.append(mse_accuracy(spec, ctx))
    return rows


def single_inference(estimator: str, ctx: EvalContext):
    """Callable mapping one masked snapshot + mask to one spectrum."""
    ctx.check(estimator)
    return lambda y, mask: estimator_spectra(estimator, y[None, :], mask[None, :], ctx)[0]


def timing_benchmark(estimators, trials: int, ctx: EvalContext, warmup: int = 100,
                     seed: int = 0) -> list:
    """Mean and spread of wall-clock seconds per single-snapshot inference."""
    spec = TrialSpec("dbf", "ula", scenario="symmetric", delta_theta=7.0, snr_db=30.0, seed=seed)
    _, y, mask = draw_trial(spec, ctx, 0)
    rows = []
    with fixed_blas():
        for est in estimators:
            fn = single_inference(est, ctx)
            for _ in range(warmup):
                fn(y, mask)
            times = np.empty(trials)
            for i in range(trials):
                t0 = time.perf_counter_ns()
                fn(y, mask)
                times[i] = time.perf_counter_ns() - t0
            times *= 1e-9
            row = {"estimator": est, "trials": trials, "mean_s": float(times.mean()),
                   "std_s": float(times.std(ddof=1)) if trials > 1 else 0.0,
                   "parameters": None}
            if est in ctx.models:
                row["parameters"] = count_parameters(ctx.models[est])
            rows.append(row)
    return rows


def resolves(values: np.ndarray, truths, grid: ScanGrid, tol: float = HIT_TOLERANCE_DEG) -> bool:
    """True when the top-K peaks pair with the K truths within ``tol`` degrees."""
    est = grid.angles_deg[peak_indices(values, len(truths))]
    return bool(np.all(np.abs(assign(est, truths)) <= tol + 1e-9))


def maxima_between(values: np.ndarray, grid: ScanGrid, lo: float, hi: float) -> np.ndarray:
    ang = grid.angles_deg[local_maxima(values)]
    return ang[(ang >= lo) & (ang <= hi)]


def spectrum_showcase(y: np.ndarray, mask: np.ndarray, estimators, ctx: EvalContext,
                      truths=()) -> dict:
    return {est: estimator_spectra(est, y[None, :], mask[None, :], ctx)[0] for est in estimators}


def showcase_csv(spectra: dict, grid: ScanGrid, truths=()) -> str:
    truth_idx = {grid.index_of(t) for t in truths}
    buf = io.StringIO()
    names = list(spectra)
    buf.write(",".join(["angle_deg", *names, "truth"]) + "\n")
    for m, ang in enumerate(grid.angles_deg):
        vals = [repr(float(spectra[nm][m])) for nm in names]
        buf.write(",".join([repr(float(ang)), *vals, "1" if m in truth_idx else "0"]) + "\n")
    return buf.getvalue()


ACCURACY_COLUMNS = ("estimator", "geometry", "sparsity", "scenario", "snr_db", "trials", "seed",
                    "mse", "mse_se", "log10_mse")
SEPARABILITY_COLUMNS = ("estimator", "geometry", "sparsity", "delta_theta", "snr_db", "trials",
                        "seed", "hit_rate", "hit_se")
TIMING_COLUMNS = ("estimator", "trials", "mean_s", "std_s", "parameters")


def rows_csv(rows, columns) -> str:
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for r in rows:
        r = dict(r)
        if "log10_mse" in columns:
            r["log10_mse"] = float(np.log10(r["mse"])) if r["mse"] > 0 else float("-inf")
        buf.write(",".join("" if r.get(c) is None else str(r[c]) for c in columns) + "\n")
    return buf.getvalue()


@dataclass
class EvalReport:
    config: dict
    accuracy: list = field(default_factory=list)
    separability: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    showcase: list = field(default_factory=list)

    def to_json(self, include_timing: bool = True) -> str:
        d = asdict(self)
        if not include_timing:
            d["timing"] = []
        return json.dumps(d, indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")
