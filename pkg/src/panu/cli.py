"""Command line: evaluate bundle directories, fit a temperature, verify
kernel gradients, and generate synthetic scenes.

Exit codes: 0 success, 1 metric-level failure (gradcheck above tolerance),
2 input or parse error.
"""

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck as gradcheck_mod
from . import metrics as metrics_mod
from . import synth as synth_mod
from .errors import PanuError
from .metrics import MetricReport
from .postprocess import PostprocessConfig, run_pipeline
from .semantic import CalibrationConfig, fit_temperature, softmax_with_temperature
from .spatial import GAUSSIAN, OffsetField, sample_gaussian_offsets
from .tensor_io import load_bundle, read_tensor, save_bundle


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0.0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _nonneg_float(text):
    value = float(text)
    if value < 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _unit_rate(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"rate out of range [0, 1]: {value}")
    return value


def _default_threads() -> int:
    return max(int(os.environ.get("PANU_THREADS", "1")), 1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panu", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evaluate", help="run postprocessing + all metrics over bundle dirs")
    ev.add_argument("--bundles", nargs="+", required=True, metavar="DIR")
    ev.add_argument("--report", required=True, metavar="PATH")
    ev.add_argument("--bins", type=_positive_int, default=10)
    ev.add_argument("--heatmap-threshold", type=float, default=0.1)
    ev.add_argument("--nms-kernel", type=_positive_int, default=7)
    ev.add_argument("--top-k", type=_positive_int, default=200)
    ev.add_argument("--oracle-centers", action="store_true")
    ev.add_argument("--oracle-semantics", action="store_true")
    ev.add_argument("--oracle-offsets", action="store_true")
    ev.add_argument("--per-image", action="store_true")
    ev.add_argument("--threads", type=_positive_int, default=None)
    ev.add_argument("--seed", type=_nonneg_int, default=0)
    ev.add_argument("--es-samples", type=_positive_int, default=10,
                    help="draws per pixel when scoring gaussian offsets")
    ev.add_argument("--max-total-variance", type=_positive_float, default=None)
    ev.add_argument("--semantic-mode", choices=["mcp", "entropy", "evidential"], default=None)

    cal = sub.add_parser("calibrate", help="fit a softmax temperature on a logits dump")
    cal.add_argument("--logits", required=True, metavar="PATH")
    cal.add_argument("--labels", required=True, metavar="PATH")
    cal.add_argument("--epochs", type=_positive_int, default=25)
    cal.add_argument("--learning-rate", type=_positive_float, default=0.001)
    cal.add_argument("--initial-temperature", type=_positive_float, default=1.0)
    cal.add_argument("--bins", type=_positive_int, default=10)
    cal.add_argument("--report", default=None, metavar="PATH")

    gc = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    gc.add_argument("--seed", type=_nonneg_int, default=0)
    gc.add_argument("--tolerance", type=_positive_float, default=1e-4)
    gc.add_argument("--trials", type=_positive_int, default=100)

    sy = sub.add_parser("synth", help="write seeded synthetic scenes as bundle dirs")
    sy.add_argument("--out", required=True, metavar="DIR")
    sy.add_argument("--scenes", type=_positive_int, default=1)
    sy.add_argument("--seed", type=_nonneg_int, default=0)
    sy.add_argument("--height", type=_positive_int, default=96)
    sy.add_argument("--width", type=_positive_int, default=96)
    sy.add_argument("--instances", type=_nonneg_int, default=6)
    sy.add_argument("--classes", type=_positive_int, default=5)
    sy.add_argument("--thing-classes", type=_positive_int, default=3)
    sy.add_argument("--flip-rate", type=_unit_rate, default=0.0)
    sy.add_argument("--offset-noise", type=_nonneg_float, default=0.0)
    sy.add_argument("--heatmap-blur", type=_nonneg_float, default=0.0)
    sy.add_argument("--calibration", choices=["perfect", "overconfident", "underconfident"],
                    default="perfect")
    sy.add_argument("--calibration-factor", type=_positive_float, default=1.0)
    sy.add_argument("--offsets-kind", choices=["point", "gaussian", "samples"], default="point")
    sy.add_argument("--samples", type=_positive_int, default=10)
    sy.add_argument("--semantic-kind", choices=["logits", "dirichlet"], default="logits")
    return parser


# -- evaluate ------------------------------------------------------------------

def _evaluate_bundle(index: int, directory: str, args, config: PostprocessConfig) -> dict:
    bundle, gt = load_bundle(directory)
    if args.oracle_offsets:
        gt_off, _ = metrics_mod.gt_offset_field(gt)
        bundle = dataclasses.replace(bundle, offsets=OffsetField.point(gt_off))
    bundle = metrics_mod.oracle_substitute(
        bundle, gt, use_gt_centers=args.oracle_centers, use_gt_semantics=args.oracle_semantics
    )
    result = run_pipeline(
        bundle,
        config,
        semantic_mode=args.semantic_mode,
        max_total_variance=args.max_total_variance,
    )
    pred = result.panoptic
    matching = metrics_mod.match_segments(pred, gt, bundle.ignore_label)

    h, w = gt.shape
    valid = gt.semantic != bundle.ignore_label
    unc_spa = result.uncertainty_spatial
    spa_map = np.zeros((h, w)) if unc_spa is None else unc_spa

    pece_scores = metrics_mod.pece_segment_scores(
        pred, gt, result.uncertainty_total, matching, bundle.ignore_label, args.bins
    )
    spa_scores = metrics_mod.pece_spa_segment_scores(
        pred, gt, spa_map, matching, bundle.ignore_label, args.bins
    )
    sem_scores = metrics_mod.pece_sem_segment_scores(
        pred, gt, result.uncertainty_semantic, matching, bundle.ignore_label, args.bins,
        semantic_labels=result.semantic_argmax,
    )

    acc = (pred.class_id == gt.semantic)[valid].astype(np.float64)
    conf = (1.0 - result.uncertainty_total)[valid]
    if acc.size:
        uece_value = metrics_mod.uece(acc, conf, args.bins)
        bins = metrics_mod.calibration_bins(acc, conf, args.bins)
        bin_stats = (bins.counts, bins.conf_means * bins.counts, bins.acc_means * bins.counts)
    else:
        uece_value = None
        bins = None
        bin_stats = None

    gt_off, thing = metrics_mod.gt_offset_field(gt)
    es_mask = thing & valid
    n_es = int(es_mask.sum())
    es_value = avg_length = rmse = None
    n_preds = 0
    if n_es:
        offsets = bundle.offsets
        if offsets.kind == GAUSSIAN:
            offsets = sample_gaussian_offsets(
                offsets, args.es_samples, (args.seed << 64) | index
            )
        offsets = offsets.as_samples()
        es_value = metrics_mod.energy_score_metric(offsets, gt_off, es_mask)
        stats = metrics_mod.offset_stats(offsets, gt_off, es_mask)
        avg_length, rmse = stats.avg_length, stats.rmse
        n_preds = n_es * offsets.num_samples

    pq = metrics_mod.panoptic_quality(matching)
    report = MetricReport(
        pq=pq.pq,
        sq=pq.sq,
        rq=pq.rq,
        pece=_mean_or_none(pece_scores),
        pece_spa=_mean_or_none(spa_scores),
        pece_sem=_mean_or_none(sem_scores),
        energy_score=es_value,
        avg_offset_length=avg_length,
        offset_rmse=rmse,
        uece=uece_value,
        bins=bins.to_records() if bins is not None else [],
        num_segments=len(matching.true_positives) + len(matching.false_positives),
        pq_per_class=pq.per_class,
        pq_class_averaged=pq.class_averaged_pq,
        no_segments=pq.no_segments,
        config={},
    )
    return {
        "name": directory,
        "report": report,
        "matching": matching,
        "pece_scores": pece_scores,
        "spa_scores": spa_scores,
        "sem_scores": sem_scores,
        "bin_stats": bin_stats,
        "n_pixels": int(acc.size),
        "es": (es_value, n_es),
        "length": (avg_length, n_preds),
        "mse": (None if rmse is None else rmse * rmse, n_preds),
    }


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(sum(values) / len(values))


def _weighted_mean(pairs):
    total = 0.0
    weight = 0
    for value, n in pairs:
        if value is not None and n:
            total += value * n
            weight += n
    return float(total / weight) if weight else None


def _pooled_report(records, args) -> MetricReport:
    pq = metrics_mod.panoptic_quality([r["matching"] for r in records])
    pece_scores = [s for r in records for s in r["pece_scores"]]
    spa_scores = [s for r in records for s in r["spa_scores"]]
    sem_scores = [s for r in records for s in r["sem_scores"]]

    counts = np.zeros(args.bins, dtype=np.int64)
    conf_sums = np.zeros(args.bins)
    acc_sums = np.zeros(args.bins)
    for r in records:
        if r["bin_stats"] is not None:
            counts += r["bin_stats"][0]
            conf_sums += r["bin_stats"][1]
            acc_sums += r["bin_stats"][2]
    n = int(counts.sum())
    uece_value = None
    bins = []
    if n:
        total = 0.0
        for i in range(args.bins):
            c = int(counts[i])
            if c:
                total += (c / n) * abs(acc_sums[i] / c - conf_sums[i] / c)
            bins.append(
                {
                    "lo": i / args.bins,
                    "hi": (i + 1) / args.bins,
                    "count": c,
                    "conf": float(conf_sums[i] / c) if c else 0.0,
                    "acc": float(acc_sums[i] / c) if c else 0.0,
                }
            )
        uece_value = float(total)

    mse = _weighted_mean(r["mse"] for r in records)
    return MetricReport(
        pq=pq.pq,
        sq=pq.sq,
        rq=pq.rq,
        pece=_mean_or_none(pece_scores),
        pece_spa=_mean_or_none(spa_scores),
        pece_sem=_mean_or_none(sem_scores),
        energy_score=_weighted_mean(r["es"] for r in records),
        avg_offset_length=_weighted_mean(r["length"] for r in records),
        offset_rmse=None if mse is None else float(np.sqrt(mse)),
        uece=uece_value,
        bins=bins,
        num_segments=len(pece_scores),
        pq_per_class=pq.per_class,
        pq_class_averaged=pq.class_averaged_pq,
        no_segments=pq.no_segments,
        config={},
    )


def _per_image_mean_report(records, args) -> dict:
    """Unweighted mean of each metric over images (None values skipped)."""
    reports = [r["report"].to_dict() for r in records]
    fields = [
        "pq", "sq", "rq", "pece", "pece_spa", "pece_sem",
        "energy_score", "avg_offset_length", "offset_rmse", "uece",
    ]
    out = {f: _mean_or_none([rep[f] for rep in reports]) for f in fields}
    out["num_segments"] = sum(rep["num_segments"] for rep in reports)
    out["scope"] = "per_image_mean"
    return out


def cmd_evaluate(args) -> int:
    try:
        config = PostprocessConfig(
            heatmap_threshold=args.heatmap_threshold,
            nms_kernel=args.nms_kernel,
            top_k=args.top_k,
        )
        threads = args.threads if args.threads is not None else _default_threads()
    except (PanuError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    def worker(item):
        index, directory = item
        try:
            return _evaluate_bundle(index, directory, args, config)
        except PanuError as exc:
            raise PanuError(f"{directory}: {exc}") from exc

    try:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                records = list(pool.map(worker, enumerate(args.bundles)))
        else:
            records = [worker(item) for item in enumerate(args.bundles)]
    except (PanuError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    config_echo = {
        "bundles": list(args.bundles),
        "bins": args.bins,
        "heatmap_threshold": args.heatmap_threshold,
        "nms_kernel": args.nms_kernel,
        "top_k": args.top_k,
        "oracle_centers": args.oracle_centers,
        "oracle_semantics": args.oracle_semantics,
        "oracle_offsets": args.oracle_offsets,
        "per_image": args.per_image,
        "seed": args.seed,
        "es_samples": args.es_samples,
        "max_total_variance": args.max_total_variance,
        "semantic_mode": args.semantic_mode,
    }
    if args.per_image:
        headline = _per_image_mean_report(records, args)
    else:
        headline = _pooled_report(records, args).to_dict()
        headline["scope"] = "pooled"
    headline.pop("config", None)
    document = {
        "config": config_echo,
        "metrics": headline,
        "images": [dict(rep["report"].to_dict(), bundle=rep["name"]) for rep in records],
    }
    for image in document["images"]:
        image.pop("config", None)
    Path(args.report).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.report} ({len(records)} bundle(s))")
    return 0


# -- calibrate -----------------------------------------------------------------

def cmd_calibrate(args) -> int:
    try:
        logits = read_tensor(args.logits).astype(np.float64)
        labels = read_tensor(args.labels)
        if logits.ndim < 2:
            raise PanuError(f"logits must be (N, C) or (H, W, C), got {logits.shape}")
        num_classes = logits.shape[-1]
        logits = logits.reshape(-1, num_classes)
        labels = np.asarray(labels).reshape(-1).astype(np.int64)
        if labels.shape[0] != logits.shape[0]:
            raise PanuError(
                f"{logits.shape[0]} logit rows but {labels.shape[0]} labels"
            )
        fit = fit_temperature(
            logits,
            labels,
            CalibrationConfig(
                epochs=args.epochs,
                learning_rate=args.learning_rate,
                initial_temperature=args.initial_temperature,
            ),
        )

        def uece_at(t: float) -> float:
            probs = softmax_with_temperature(logits, t)
            conf = probs.max(axis=-1)
            acc = (probs.argmax(axis=-1) == labels).astype(np.float64)
            return metrics_mod.uece(acc, conf, args.bins)

        initial_uece = uece_at(args.initial_temperature)
        final_uece = uece_at(fit.temperature)
    except (PanuError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    print(f"fitted temperature: {fit.temperature:.6f}")
    print(f"cross-entropy: initial {fit.initial_loss:.6f} -> final {fit.final_loss:.6f}")
    print(f"uECE: initial {initial_uece:.6f} -> final {final_uece:.6f}")
    if fit.warning:
        print("warning: final loss did not improve on the initial loss")
    if args.report:
        Path(args.report).write_text(
            json.dumps(
                {
                    "temperature": fit.temperature,
                    "initial_loss": fit.initial_loss,
                    "final_loss": fit.final_loss,
                    "initial_uece": initial_uece,
                    "final_uece": final_uece,
                    "warning": fit.warning,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
    return 0


# -- gradcheck -----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    result = gradcheck_mod.run_gradcheck(seed=args.seed, tolerance=args.tolerance, trials=args.trials)
    print(f"{'kernel':24s} {'max_rel_err':>12s} {'tolerance':>12s}  status")
    for name in gradcheck_mod.KERNELS:
        err = result.max_errors[name]
        status = "PASS" if err < args.tolerance else "FAIL"
        print(f"{name:24s} {err:12.3e} {args.tolerance:12.3e}  {status}")
    return 0 if result.passed else 1


# -- synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    directories = []
    try:
        for i in range(args.scenes):
            cfg = synth_mod.SceneConfig(
                height=args.height,
                width=args.width,
                num_instances=args.instances,
                num_classes=args.classes,
                num_thing_classes=args.thing_classes,
                flip_rate=args.flip_rate,
                offset_noise=args.offset_noise,
                heatmap_blur=args.heatmap_blur,
                calibration=args.calibration,
                calibration_factor=args.calibration_factor,
                offsets_kind=args.offsets_kind,
                num_samples=args.samples,
                semantic_kind=args.semantic_kind,
                seed=args.seed + i,
            )
            scene = synth_mod.generate_scene(cfg)
            directory = out / f"scene_{i:03d}"
            save_bundle(directory, scene.bundle, scene.gt)
            directories.append(str(directory))
    except (PanuError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for d in directories:
        print(d)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "evaluate":
        return cmd_evaluate(args)
    if args.command == "calibrate":
        return cmd_calibrate(args)
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    return cmd_synth(args)


if __name__ == "__main__":
    sys.exit(main())
