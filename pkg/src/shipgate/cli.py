"""``shipgate`` command line: energy | infer | sweep | dataset | map | model."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from . import energy as en
from .estimators import check_image_batch, fit_to_input
from .event_engine import (
    average_stats, layer_breakdown, mean_density, recount_ops, stats_to_csv,
    stats_to_json, trace,
)
from .exceptions import InvalidInputError, MissingFileError, RecordFormatError, ShipgateError
from .gate import classify_metrics, flagged_fraction, sweep_thresholds, sweep_to_csv
from .map_eval import eval_subsets, import_detections, synthetic_detector
from .netdef import build_akidanet05, describe, load_model, save_model, synth_weights
from .qtensor import QuantTensor

REFERENCE_DEFAULTS = {
    "n_total": 38511,
    "prevalence": 0.221,
    "recall": 0.9764,
    "precision": 0.8973,
    "gate_static_w": en.GATE_STATIC_W,
    "gate_dynamic_w": en.GATE_DYNAMIC_W,
    "gate_fps": en.GATE_FPS,
    "detector_w": en.DETECTOR_W,
    "detector_fps": en.DETECTOR_FPS,
}
REFERENCE_PER_IMAGE_MJ = 5.15
REFERENCE_PER_IMAGE_MS = 11.7


def _emit(args, name: str, payload, text: bool = False):
    if args.output_dir is None:
        return None
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    if text:
        path.write_text(payload, encoding="utf-8")
    else:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _report(args, body: dict) -> dict:
    return {"tool": "shipgate", "version": __version__, "config": _config(args), **body}


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# --- energy ------------------------------------------------------------------

def cmd_energy(args) -> dict:
    gate = en.gate_stage(args.gate_static_w, args.gate_dynamic_w, args.gate_fps)
    detector = en.detector_stage(args.detector_w, args.detector_fps)
    if args.n_flagged is not None:
        n_flagged, source = args.n_flagged, "explicit"
    elif args.flag_rate is not None:
        if not 0 <= args.flag_rate <= 1:
            raise InvalidInputError("--flag-rate must lie in [0, 1]")
        n_flagged, source = int(round(args.flag_rate * args.n_total)), "flag-rate"
    else:
        n_flagged, _ = flagged_fraction(args.n_total, args.prevalence, args.recall, args.precision)
        source = "recall/precision"
    report = en.energy_report(args.n_total, n_flagged, gate, detector, args.duty_cycle)
    report["n_flagged_source"] = source
    report["gate_batch"] = en.batch_energy(args.batch_dynamic_w, args.batch_duration_s, args.batch_size)
    report = _report(args, report)
    _emit(args, "energy_report.json", report)
    _print(report)
    return report


# --- infer -------------------------------------------------------------------

def synthetic_images(n: int, size: int, seed: int, ship_fraction: float = 0.221):
    """Sea-like images: flat noisy background, a bright rectangle on ship images."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(n):
        base = rng.integers(20, 90, size=3)
        img = base[:, None, None] + rng.normal(0, 4, size=(3, size, size))
        ship = rng.random() < ship_fraction
        if ship:
            h, w = rng.integers(max(size // 32, 2), max(size // 8, 3), size=2)
            r, c = rng.integers(0, size - h), rng.integers(0, size - w)
            img[:, r:r + h, c:c + w] = rng.integers(180, 256)
        images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        labels.append(int(ship))
    return np.stack(images), labels


def _collect_images(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(f for f in p.iterdir() if f.suffix.lower() in (".ppm", ".raw")))
        elif p.exists():
            files.append(p)
        else:
            raise MissingFileError(f"image not found: {p}")
    if not files:
        raise InvalidInputError("no .ppm or .raw images found")
    return files


def _load_graph(args):
    if args.model:
        if not Path(args.model).exists():
            raise MissingFileError(f"model not found: {args.model}")
        return load_model(args.model)
    return synth_weights(build_akidanet05(args.input_size), args.seed, args.sparsity_bias)


def cmd_infer(args) -> dict:
    graph = _load_graph(args)
    if args.images:
        files = _collect_images(args.images)
        ids = [f.stem for f in files]
        batch = [check_image_batch(ds.read_image(f))[0] for f in files]
        shapes = {b.shape for b in batch}
        if len(shapes) != 1:
            raise InvalidInputError(f"images differ in shape: {sorted(shapes)}")
        images, labels = np.stack(batch), None
    else:
        images, labels = synthetic_images(args.synthetic, graph.input_shape[1], args.seed)
        ids = [f"synthetic_{i:05d}" for i in range(len(images))]
    images = fit_to_input(images, graph.input_shape[1:])

    cost = en.EventCostModel(args.alpha, args.beta, args.ops_per_ms)

    def run(img):
        return trace(graph, QuantTensor(img, graph.input_bits, False, graph.input_scale), args.mode, cost)

    with ThreadPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        traces = list(pool.map(run, images))

    if args.verify:
        for i, t in enumerate(traces):
            recount = recount_ops(graph, t.activations)
            counted = [s.synaptic_ops for s in t.stats]
            if recount != counted:
                raise ShipgateError(f"op recount mismatch on image {ids[i]}: {counted} != {recount}")

    stats = average_stats([t.stats for t in traces])
    if args.calibrate:
        cost = cost.calibrated(stats, REFERENCE_PER_IMAGE_MJ, REFERENCE_PER_IMAGE_MS)
    breakdown = layer_breakdown(stats, cost)
    for s, lat, e in zip(stats, np.diff(breakdown["cumulative_latency_ms"], prepend=0.0), breakdown["energy_mJ"]):
        s.latency_ms, s.energy_mJ = float(lat), float(e)

    score_rows = ["image_id,score,decision" + (",label" if labels is not None else "")]
    for i, t in enumerate(traces):
        row = f"{ids[i]},{t.score!r},{int(t.score >= args.threshold)}"
        score_rows.append(row + (f",{labels[i]}" if labels is not None else ""))
    bd_rows = ["layer,cumulative_latency_ms,energy_mJ,input_density"]
    bd_rows += [
        f"{l},{c!r},{e!r},{d!r}"
        for l, c, e, d in zip(breakdown["layer"], breakdown["cumulative_latency_ms"], breakdown["energy_mJ"], breakdown["input_density"])
    ]
    _emit(args, "scores.csv", "\n".join(score_rows) + "\n", text=True)
    _emit(args, "layer_stats.csv", stats_to_csv(stats), text=True)
    _emit(args, "layer_stats.json", stats_to_json(stats), text=True)
    _emit(args, "layer_breakdown.csv", "\n".join(bd_rows) + "\n", text=True)
    report = _report(args, {
        "n_images": len(traces),
        "mode": args.mode,
        "mean_density": mean_density(stats),
        "per_image_energy_mJ": float(sum(breakdown["energy_mJ"])),
        "per_image_latency_ms": float(breakdown["cumulative_latency_ms"][-1]),
        "cost_model": {"alpha_mJ": cost.alpha_mJ, "beta_mJ": cost.beta_mJ, "ops_per_ms": cost.ops_per_ms},
        "scores": {i: t.score for i, t in zip(ids, traces)},
        "flagged": int(sum(t.score >= args.threshold for t in traces)),
        "verified": bool(args.verify),
    })
    _emit(args, "infer_report.json", report)
    summary = {k: report[k] for k in ("n_images", "mode", "mean_density", "per_image_energy_mJ", "per_image_latency_ms", "flagged")}
    _print(summary)
    return report


# --- sweep -------------------------------------------------------------------

def read_scores(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"scores not found: {path}")
    ids, scores, labels = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"score", "label"} <= set(reader.fieldnames):
            raise RecordFormatError("header must include score and label", 1)
        for line, row in enumerate(reader, start=2):
            try:
                scores.append(float(row["score"]))
                labels.append(int(row["label"]))
            except (TypeError, ValueError):
                raise RecordFormatError("unparseable score or label", line) from None
            ids.append(row.get("image_id") or str(line - 1))
    return ids, np.array(scores), np.array(labels)


def cmd_sweep(args) -> dict:
    _, scores, labels = read_scores(args.scores)
    curve = sweep_thresholds(scores, labels)
    at = {}
    for t in args.thresholds:
        m = classify_metrics(scores, labels, t)
        c = m.pop("counts")
        at[repr(t)] = {**m, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn, "flagged": c.flagged,
                       "flag_rate": c.flagged / c.total}
    _emit(args, "pr_curve.csv", sweep_to_csv(curve), text=True)
    report = _report(args, {"n_samples": int(scores.size), "prevalence": float(labels.mean()), "at_thresholds": at})
    _emit(args, "sweep_report.json", report)
    _print(report)
    return report


# --- dataset -----------------------------------------------------------------

def cmd_dataset(args) -> dict:
    manifest = ds.read_manifest(args.manifest, args.width, args.height)
    if args.split_ratio is not None:
        manifest = ds.split(manifest, args.split_ratio, args.seed)
    stats = ds.dataset_stats(manifest)
    if manifest.assignments:
        parts = list(manifest.assignments.values())
        stats["n_train"] = parts.count("train")
        stats["n_val"] = parts.count("val")
        _emit(args, "split.json", {"seed": manifest.seed, "assignments": manifest.assignments})
    report = _report(args, {"stats": stats})
    _emit(args, "dataset_stats.json", report)
    _emit(args, "diagonal_histogram.csv", ds.histogram_to_csv(ds.diagonal_histogram(manifest, args.bin_width)), text=True)
    _print(report)
    return report


# --- map ---------------------------------------------------------------------

def cmd_map(args) -> dict:
    manifest = ds.read_manifest(args.manifest, args.width, args.height)
    if args.subset == "val":
        if args.split_seed is not None:
            manifest = ds.split(manifest, args.split_ratio, args.split_seed)
        manifest = manifest.subset("val")
    if args.detections:
        detections = import_detections(args.detections, args.width, args.height)
    else:
        detections = synthetic_detector(
            manifest, args.seed, args.tp_rate, args.fp_rate_shipfree, args.fp_rate_ship,
            args.jitter_px, args.confidence_model,
        )
    result = eval_subsets(detections, manifest, args.map_mode)
    result["source"] = detections.source
    report = _report(args, result)
    _emit(args, "map_report.json", report)
    _print(report)
    return report


# --- model -------------------------------------------------------------------

def cmd_model(args) -> dict:
    if args.inspect:
        if not Path(args.inspect).exists():
            raise MissingFileError(f"model not found: {args.inspect}")
        info = describe(load_model(args.inspect))
        _print(info)
        return info
    graph = build_akidanet05(args.input_size)
    if args.synth:
        graph = synth_weights(graph, args.seed, args.sparsity_bias)
    info = describe(graph)
    if args.output_dir is not None:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        info["path"] = str(save_model(graph, out / args.name))
    _print({k: info[k] for k in info if k != "layers"})
    return info


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shipgate", description=__doc__)
    parser.add_argument("--version", action="version", version=f"shipgate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--output-dir", default=None, help="directory for emitted files")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("energy", help="cascade vs detector-only energy")
    common(p)
    d = REFERENCE_DEFAULTS
    p.add_argument("--n-total", type=int, default=d["n_total"])
    g = p.add_mutually_exclusive_group()
    g.add_argument("--n-flagged", type=int, default=None)
    g.add_argument("--flag-rate", type=float, default=None)
    p.add_argument("--prevalence", type=float, default=d["prevalence"])
    p.add_argument("--recall", type=float, default=d["recall"])
    p.add_argument("--precision", type=float, default=d["precision"])
    p.add_argument("--gate-static-w", type=float, default=d["gate_static_w"])
    p.add_argument("--gate-dynamic-w", type=float, default=d["gate_dynamic_w"])
    p.add_argument("--gate-fps", type=float, default=d["gate_fps"])
    p.add_argument("--detector-w", type=float, default=d["detector_w"])
    p.add_argument("--detector-fps", type=float, default=d["detector_fps"])
    p.add_argument("--batch-dynamic-w", type=float, default=en.GATE_TABLE_DYNAMIC_W)
    p.add_argument("--batch-duration-s", type=float, default=en.GATE_TABLE_BATCH_S)
    p.add_argument("--batch-size", type=int, default=en.GATE_TABLE_BATCH)
    p.add_argument("--duty-cycle", action="store_true", help="charge gate static power over pipeline wall time")
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("infer", help="batch gate inference with layer statistics")
    common(p)
    p.add_argument("--model", default=None, help=".aknw file; synthesized from --seed when omitted")
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--sparsity-bias", type=float, default=0.25)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--images", nargs="+", default=None, help=".ppm/.raw files or directories")
    src.add_argument("--synthetic", type=int, default=100, help="number of synthetic images")
    p.add_argument("--mode", choices=("events", "dense"), default="events")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=1e-6, help="mJ per input event")
    p.add_argument("--beta", type=float, default=0.0, help="mJ per layer")
    p.add_argument("--ops-per-ms", type=float, default=1e7)
    p.add_argument("--calibrate", action="store_true", help="scale cost model to 5.15 mJ and 11.7 ms per image")
    p.add_argument("--verify", action="store_true", help="recount ops independently and fail on mismatch")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep", help="precision/recall over decision thresholds")
    common(p)
    p.add_argument("--scores", required=True, help="CSV with score,label (image_id optional)")
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 0.1])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dataset", help="annotation statistics and train/val split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--width", type=int, default=ds.IMAGE_SIZE)
    p.add_argument("--height", type=int, default=ds.IMAGE_SIZE)
    p.add_argument("--split-ratio", type=float, default=None, help="train fraction, e.g. 0.8")
    p.add_argument("--bin-width", type=float, default=10.0)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("map", help="single-class mAP over full set and ship-only subset")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections", default=None, help="detection CSV; synthetic detector when omitted")
    p.add_argument("--width", type=int, default=ds.IMAGE_SIZE)
    p.add_argument("--height", type=int, default=ds.IMAGE_SIZE)
    p.add_argument("--subset", choices=("all", "val"), default="all")
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--map-mode", choices=("50", "50:95"), default="50")
    p.add_argument("--tp-rate", type=float, default=0.9)
    p.add_argument("--fp-rate-shipfree", type=float, default=0.2)
    p.add_argument("--fp-rate-ship", type=float, default=0.1)
    p.add_argument("--jitter-px", type=float, default=2.0)
    p.add_argument("--confidence-model", choices=("informative", "uniform"), default="informative")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("model", help="build, synthesize, save or inspect .aknw models")
    common(p)
    p.add_argument("--synth", action="store_true", help="fill the layout with synthetic weights")
    p.add_argument("--sparsity-bias", type=float, default=0.25)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--name", default="model.aknw")
    p.add_argument("--inspect", default=None, metavar="PATH")
    p.set_defaults(func=cmd_model)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ShipgateError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
