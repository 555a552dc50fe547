"""``sparsedoa`` command line: dataset, train, eval, infer, import-real, report.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numerical abort, 5 invalid input (shape mismatch, malformed CSV, degenerate
snapshot, unknown estimator).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import numpy as np

from . import __version__
from .array_signal import manifold, steering_vector
from .classical import DegenerateArrayError, peak_indices
from .config import ConfigError, RunConfig, load_config, with_overrides
from .container import ContainerError
from .dataset import build_dataset, import_real, load_dataset, save_dataset, superpose_measurements
from .evaluation import (ACCURACY_COLUMNS, SEPARABILITY_COLUMNS, TIMING_COLUMNS, EvalContext, EvalReport,
                         TrialSpec, accuracy_sweep, estimator_spectra, hit_rate, local_maxima, rows_csv,
                         showcase_csv, spectrum_showcase, timing_benchmark)
from .features import DegenerateMaskError, fixed_removal_mask, threshold_mask
from .network import (ShapeMismatch, TrainingAborted, history_csv, load_checkpoint, manifest_json,
                      predict, save_checkpoint, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_INPUT = 5

log = logging.getLogger("sparsedoa")


class InputError(ValueError):
    pass


def _write(path: str, data) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(data)


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _prepare_out(out: str) -> str:
    os.makedirs(out, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out!r} is not writable")
    return out


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} {path!r} does not exist")
    return path


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    flags = {k: getattr(args, k, None) for k in
             ("seed", "out", "count", "epochs", "batch", "lr", "max_sparsity", "trials",
              "snr", "estimators", "model", "precision")}
    return with_overrides(cfg, **flags)


def _model_name(kind: str) -> str:
    return "network" if kind == "augmented" else "mlp"


# ---------------------------------------------------------------- commands


def cmd_dataset(args) -> int:
    cfg = _config(args)
    out = _prepare_out(cfg.out)
    d = cfg.dataset
    ds = build_dataset(d.train_count, d.val_per_snr, d.snr_levels_db, seed=cfg.seed,
                       grid=cfg.grid.build(), geometry=cfg.array.build(), k_range=(d.k_min, d.k_max),
                       amplitude_range=(d.amplitude_min, d.amplitude_max))
    ds.manifest["run_config"] = cfg.echo()
    blob = save_dataset(ds)
    _write(os.path.join(out, "dataset.sdoa"), blob)
    _write(os.path.join(out, "dataset_manifest.json"),
           json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ds)} samples ({int(np.sum(ds.split == 0))} train, "
          f"{int(np.sum(ds.split == 1))} validation) to {out}/dataset.sdoa")
    print(f"sha256 {hashlib.sha256(blob).hexdigest()}")
    for k in np.unique(ds.k):
        print(f"  K={int(k)}: {int(np.sum(ds.k == k))}")
    for snr in np.unique(ds.snr_db):
        print(f"  snr {snr:g} dB: {int(np.sum(ds.snr_db == snr))}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    _require_file(args.dataset, "dataset")
    out = _prepare_out(cfg.out)
    blob = _read_bytes(args.dataset)
    ds = load_dataset(blob)
    grid, geom = cfg.grid.build(), cfg.array.build()
    if ds.grid_size != grid.size or ds.n_elements != geom.n_elements:
        raise ShapeMismatch(f"dataset has {ds.n_elements} elements x {ds.grid_size} bins, config expects "
                            f"{geom.n_elements} x {grid.size}")
    result = train(ds, cfg.train, manifold(geom, grid))
    params = result.params
    params.metadata.update(run_config=cfg.echo(), dataset_sha256=hashlib.sha256(blob).hexdigest(),
                           dataset_seed=ds.manifest.get("seed"))
    stem = os.path.join(out, cfg.train.model)
    _write(stem + ".ckpt", save_checkpoint(params))
    _write(stem + "_train_log.csv", history_csv(result.history))
    _write(stem + "_manifest.json", manifest_json(params) + "\n")
    print(f"best epoch {result.best_epoch} val loss {params.metadata['best_val_loss']:.5f} "
          f"(initial {result.initial_val_loss:.5f}); {result.seconds:.1f} s")
    print(f"wrote {stem}.ckpt")
    return EXIT_OK


def _load_models(paths, cfg: RunConfig) -> dict:
    models = {}
    grid, geom = cfg.grid.build(), cfg.array.build()
    for p in paths:
        params = load_checkpoint(_read_bytes(p), grid.size, geom.n_elements)
        name = _model_name(params.kind)
        if name in models:
            name = f"{name}{sum(n.startswith(name) for n in models) + 1}"
        models[name] = params
    return models


def _showcase(cfg: RunConfig, ctx: EvalContext, estimators) -> tuple[dict, list]:
    """Noiseless two-target scene on the ULA and on random sparse arrays."""
    geom = ctx.geometry
    n = geom.n_elements
    truths = list(cfg.eval.showcase_angles)
    y = steering_vector(geom, np.asarray(truths)).sum(axis=1)
    masks = [("ula", np.ones(n, dtype=np.int8))]
    for i in range(cfg.eval.showcase_slas):
        m = fixed_removal_mask(n, int(round(cfg.eval.sparsity * n)), np.random.default_rng([cfg.seed, 11, i]))
        masks.append((f"sla{i + 1}", m))
    tables, summary = {}, []
    for name, mask in masks:
        spectra = spectrum_showcase(y * mask, mask, estimators, ctx)
        tables[name] = showcase_csv(spectra, ctx.grid, truths)
        for est, v in spectra.items():
            maxima = ctx.grid.angles_deg[local_maxima(v)]
            top = np.sort(ctx.grid.angles_deg[peak_indices(v, len(truths))])
            summary.append({"array": name, "mask": mask.tolist(), "estimator": est,
                            "local_maxima_deg": maxima.tolist(), "top_peaks_deg": top.tolist(),
                            "resolved": bool(np.all(np.abs(top - np.sort(truths)) <= 1.0 + 1e-9))})
    return tables, summary


def cmd_eval(args) -> int:
    cfg = _config(args)
    for p in args.checkpoint:
        _require_file(p, "checkpoint")
    out = _prepare_out(cfg.out)
    e = cfg.eval
    models = _load_models(args.checkpoint, cfg)
    ctx = EvalContext(cfg.array.build(), cfg.grid.build(), models, iaa_iters=e.iaa_iters,
                      workers=args.workers or e.workers)
    estimators = list(dict.fromkeys(list(e.estimators) + list(models)))
    for est in estimators:
        ctx.check(est)
    spectral = [x for x in estimators if x != "oracle"]

    acc = {}
    for scenario in ("single", "two_target"):
        rows = accuracy_sweep(spectral, e.geometries, scenario, e.snr_levels_db, e.trials, cfg.seed, ctx,
                              sparsity=e.sparsity)
        acc[scenario] = rows
        _write(os.path.join(out, f"accuracy_{scenario}.csv"), rows_csv(rows, ACCURACY_COLUMNS))
    sep = []
    for geom in e.geometries:
        for est in spectral:
            spec = TrialSpec(est, geom, e.sparsity, "symmetric", e.hit_snr_db, e.trials, cfg.seed,
                             delta_theta=1.0)
            sep.extend(hit_rate(spec, e.delta_thetas, ctx))
    _write(os.path.join(out, "separability.csv"), rows_csv(sep, SEPARABILITY_COLUMNS))
    timing = [] if args.no_timing else timing_benchmark(spectral, e.timing_trials, ctx, seed=cfg.seed)
    _write(os.path.join(out, "timing.csv"), rows_csv(timing, TIMING_COLUMNS))
    tables, showcase = _showcase(cfg, ctx, spectral)
    for name, text in tables.items():
        _write(os.path.join(out, f"showcase_{name}.csv"), text)

    config = {"run_config": cfg.echo(), "version": __version__,
              "checkpoints": {name: {"kind": p.kind, "parameters": int(sum(t.size for t in p.tensors())),
                                     "metadata_seed": p.seed} for name, p in models.items()}}
    report = EvalReport(config, acc["single"] + acc["two_target"], sep, timing, showcase)
    # timing is wall-clock and varies run to run; it lives beside the deterministic report
    _write(os.path.join(out, "report.json"), report.to_json(include_timing=False) + "\n")
    _write(os.path.join(out, "timing.json"), json.dumps(timing, indent=2, sort_keys=True) + "\n")
    print(f"wrote report.json, accuracy/separability/timing/showcase CSVs to {out}")
    return EXIT_OK


def read_snapshot_csv(path: str) -> np.ndarray:
    """Complex snapshot from ``re,im`` rows; an optional header line is skipped."""
    values = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == ["re", "im"]:
                continue
            if len(row) != 2:
                raise InputError(f"{path}: line {lineno}: expected 2 fields (re,im), got {len(row)}")
            try:
                re_, im_ = float(row[0]), float(row[1])
            except ValueError:
                raise InputError(f"{path}: line {lineno}: non-numeric value in {','.join(row)!r}") from None
            if not (np.isfinite(re_) and np.isfinite(im_)):
                raise InputError(f"{path}: line {lineno}: non-finite value")
            values.append(complex(re_, im_))
    if not values:
        raise InputError(f"{path}: no snapshot values")
    return np.array(values)


def _inference_mask(y: np.ndarray, n_active: int | None) -> np.ndarray:
    if n_active is None:
        return threshold_mask(y)
    if not 1 <= n_active <= len(y):
        raise InputError(f"--n-active {n_active} outside [1, {len(y)}]")
    # keep the n_active strongest entries
    keep = np.argsort(-np.abs(y), kind="stable")[:n_active]
    mask = np.zeros(len(y), dtype=np.int8)
    mask[keep] = 1
    return mask


def cmd_infer(args) -> int:
    cfg = _config(args)
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.snapshot, "snapshot")
    out = _prepare_out(cfg.out)
    grid, geom = cfg.grid.build(), cfg.array.build()
    params = load_checkpoint(_read_bytes(args.checkpoint), grid.size)
    y = read_snapshot_csv(args.snapshot)
    if len(y) != params.n_elements:
        raise ShapeMismatch(f"snapshot has {len(y)} entries, model expects {params.n_elements}")
    if not np.any(y):
        raise DegenerateMaskError("all-zero snapshot")
    mask = _inference_mask(y, args.n_active)
    A = manifold(geom, grid)
    spectrum = predict(params, (y * mask)[None], mask[None], mask.sum(keepdims=True), A)[0]
    peaks = np.sort(grid.angles_deg[peak_indices(spectrum, args.k)])
    lines = ["angle_deg,value"] + [f"{a!r},{float(v)!r}" for a, v in zip(grid.angles_deg.tolist(), spectrum)]
    _write(os.path.join(out, "spectrum.csv"), "\n".join(lines) + "\n")
    _write(os.path.join(out, "peaks.csv"), "peak_deg\n" + "".join(f"{p!r}\n" for p in peaks.tolist()))
    print(f"active elements: {int(mask.sum())} of {len(y)}")
    print("peaks (deg): " + ", ".join(f"{p:g}" for p in peaks))
    return EXIT_OK


def cmd_import_real(args) -> int:
    cfg = _config(args)
    _require_file(args.input, "measurement file")
    for p in args.checkpoint:
        _require_file(p, "checkpoint")
    out = _prepare_out(cfg.out)
    rec = import_real(_read_bytes(args.input))
    grid, geom = cfg.grid.build(), cfg.array.build()
    if rec.snapshots.shape[1] != geom.n_elements:
        raise ShapeMismatch(f"records have {rec.snapshots.shape[1]} elements, config expects {geom.n_elements}")
    ctx = EvalContext(geom, grid, _load_models(args.checkpoint, cfg), iaa_iters=cfg.eval.iaa_iters)
    masks = threshold_mask(rec.snapshots)
    dbf = estimator_spectra("dbf", rec.snapshots * masks, masks, ctx)
    spectrum_rows = ["index,angle_deg,n_active,dbf_peak_deg"]
    for i, (ang, n_act, v) in enumerate(zip(rec.angles_deg, rec.n_active, dbf)):
        spectrum_rows.append(f"{i},{float(ang)!r},{int(n_act)},{float(grid.angles_deg[np.argmax(v)])!r}")
    _write(os.path.join(out, "records.csv"), "\n".join(spectrum_rows) + "\n")
    pair = args.pair if args.pair is not None else cfg.eval.showcase_angles
    picks = [int(np.argmin(np.abs(rec.angles_deg - a))) for a in pair]
    y = superpose_measurements([rec.snapshots[i] for i in picks])
    mask = threshold_mask(y)
    truths = [float(rec.angles_deg[i]) for i in picks]
    estimators = ["dbf", "iaa", *ctx.models]
    spectra = spectrum_showcase(y * mask, mask, estimators, ctx)
    _write(os.path.join(out, "showcase_real.csv"), showcase_csv(spectra, grid, truths))
    print(f"imported {len(rec.angles_deg)} records; superposed records {picks} at {truths} deg")
    for est, v in spectra.items():
        print(f"  {est}: local maxima {grid.angles_deg[local_maxima(v)].tolist()}")
    return EXIT_OK


def _fmt(x, spec=".4g"):
    return "" if x is None else format(x, spec)


def cmd_report(args) -> int:
    _require_file(args.report, "report")
    with open(args.report) as fh:
        report = EvalReport.from_json(fh.read())
    lines = []
    for scenario in ("single", "two_target"):
        rows = [r for r in report.accuracy if r["scenario"] == scenario]
        if not rows:
            continue
        lines.append(f"MSE (deg^2), {scenario} scenario")
        for geom in sorted({r["geometry"] for r in rows}):
            sub = [r for r in rows if r["geometry"] == geom]
            snrs = sorted({r["snr_db"] for r in sub})
            ests = list(dict.fromkeys(r["estimator"] for r in sub))
            lines.append(f"  [{geom}] snr_db: " + " ".join(f"{s:>9g}" for s in snrs))
            for est in ests:
                vals = {r["snr_db"]: r["mse"] for r in sub if r["estimator"] == est}
                lines.append(f"  {est:>12}: " + " ".join(f"{_fmt(vals.get(s)):>9}" for s in snrs))
        lines.append("")
    if report.separability:
        lines.append("hit rate vs separation")
        for geom in sorted({r["geometry"] for r in report.separability}):
            sub = [r for r in report.separability if r["geometry"] == geom]
            dts = sorted({r["delta_theta"] for r in sub})
            lines.append(f"  [{geom}] dtheta: " + " ".join(f"{d:>6g}" for d in dts))
            for est in dict.fromkeys(r["estimator"] for r in sub):
                vals = {r["delta_theta"]: r["hit_rate"] for r in sub if r["estimator"] == est}
                lines.append(f"  {est:>12}: " + " ".join(f"{_fmt(vals.get(d), '.3f'):>6}" for d in dts))
        lines.append("")
    timing = report.timing
    timing_path = os.path.join(os.path.dirname(args.report), "timing.json")
    if not timing and os.path.isfile(timing_path):
        with open(timing_path) as fh:
            timing = json.load(fh)
    if timing:
        lines.append("inference time per snapshot")
        for r in timing:
            params = "" if r.get("parameters") is None else f"  {r['parameters']:,} parameters"
            lines.append(f"  {r['estimator']:>12}: {1e3 * r['mean_s']:.3f} ms (sd {1e3 * r['std_s']:.3f}){params}")
        lines.append("")
    if report.showcase:
        lines.append("two-target showcase (top peaks)")
        for r in report.showcase:
            flag = "resolved" if r["resolved"] else "not resolved"
            lines.append(f"  {r['array']:>5} {r['estimator']:>8}: {r['top_peaks_deg']} {flag}")
    text = "\n".join(lines).rstrip() + "\n"
    print(text, end="")
    if args.out:
        _write(os.path.join(_prepare_out(args.out), "summary.txt"), text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> list:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsedoa", description="Single-snapshot DOA estimation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    p = common(sub.add_parser("dataset", help="generate a labelled dataset"))
    p.add_argument("--count", type=int, help="number of training samples")
    p.set_defaults(func=cmd_dataset)

    p = common(sub.add_parser("train", help="train a model on a dataset file"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-sparsity", type=float)
    p.add_argument("--model", choices=["augmented", "plain"])
    p.add_argument("--precision", choices=["float64", "float32"])
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="Monte-Carlo evaluation"))
    p.add_argument("--checkpoint", action="append", default=[], help="repeatable")
    p.add_argument("--trials", type=int)
    p.add_argument("--snr", type=_floats, help="comma-separated SNR levels in dB")
    p.add_argument("--estimators", type=_names, help="comma-separated, e.g. dbf,iaa")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("infer", help="spectrum for one snapshot CSV"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snapshot", required=True, help="CSV with re,im rows")
    p.add_argument("--k", type=int, default=1, help="number of peaks to report")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--n-active", type=int)
    g.add_argument("--auto-threshold", action="store_true", help="infer active elements (default)")
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("import-real", help="validate a measurement file and build a showcase"))
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--pair", type=_floats, help="two angle tags to superpose, e.g. 0,7")
    p.set_defaults(func=cmd_import_real)

    p = sub.add_parser("report", help="print tables from an eval report")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (OSError, ContainerError) as exc:
        code, msg = EXIT_IO, f"I/O error: {exc}"
    except (TrainingAborted, np.linalg.LinAlgError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical error: {exc}"
    except (ShapeMismatch, DegenerateMaskError, DegenerateArrayError, InputError, KeyError, ValueError) as exc:
        code, msg = EXIT_INPUT, f"input error: {exc}"
    print(f"sparsedoa: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
