import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .benchmark import measure_fps, time_training
from .checkpoint import ModelCheckpoint
from .config import RunConfig
from .data_pipeline import DatasetSplits, load_manifest, stratified_split, verify_no_leakage
from .errors import BackboneUnavailableError, ConfigurationError, DatasetError, ProtocolViolation
from .evaluation import (
    PUBLISHED_REFERENCE_ROWS,
    ComparisonRow,
    EvalReport,
    confusion,
    emit_comparison_report,
    roc_pr_auc,
    write_curves_csv,
)
from .explainability import render_gallery
from .model_zoo import Backbone, BackboneSpec, ModelSpec, build_model, count_parameters
from .plot import plot_confusion, plot_efficiency, plot_history, plot_roc_pr
from .synthetic import generate_corpus
from .training import AblationFactor, evaluate, kfold_cv, run_ablation, training_records

logger = logging.getLogger(__name__)

COMMANDS = ("synth", "prepare", "train", "cv", "ablate", "eval", "gradcam", "bench", "report")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_PROTOCOL = 3


class AuditFailed(RuntimeError):
    pass


def build_parser():
    parser = argparse.ArgumentParser(prog="solar-defect", description="Solar panel defect classification toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="Override a key")
    parser.add_argument("--seed", type=int, help="Seed of the split, the training and the synthetic corpus")
    parser.add_argument("--jobs", type=int, help="Parallel jobs of cv and ablate")
    parser.add_argument("--output-dir", help="Root of every artifact of the run")
    parser.add_argument("--data-root", help="Directory of class folders")
    parser.add_argument("--checkpoint", help="Checkpoint for eval, gradcam and bench (default: train/model.ckpt)")
    parser.add_argument("--run", action="append", default=[], help="Other run directories to include in report")
    parser.add_argument("--force", action="store_true", help="Overwrite a non empty synth destination")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def configure_logging(output_dir, verbose=False):
    root = logging.getLogger("solar_defect")
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
    root.addHandler(console)

    output_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(output_dir / "run.log", encoding="utf-8")
    file_handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
    root.addHandler(file_handler)


def resolve_config(args):
    run = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"training.seed={args.seed}", f"split.seed={args.seed}", f"synth.seed={args.seed}"]
    if args.jobs is not None:
        overrides += [f"cv.jobs={args.jobs}", f"ablation.jobs={args.jobs}"]
    if args.output_dir is not None:
        overrides.append(f"paths.output_dir={json.dumps(args.output_dir)}")
    if args.data_root is not None:
        overrides.append(f"paths.data_root={json.dumps(args.data_root)}")
    return run.with_overrides(overrides) if overrides else run


def _write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as file:
        json.dump(data, file, indent=2, sort_keys=True)
    return path


def _read_json(path):
    with open(path, "r") as file:
        return json.load(file)


def _output_dir(run):
    return Path(run.paths.output_dir)


def _load_splits(run):
    directory = _output_dir(run) / "prepare"
    if not (directory / "classes.json").is_file():
        raise DatasetError(f"No prepared splits in '{directory}', run the prepare command first")
    return DatasetSplits.read(directory)


def _load_checkpoint(run, args):
    path = Path(args.checkpoint) if args.checkpoint else _output_dir(run) / "train" / "model.ckpt"
    if not path.is_file():
        raise ConfigurationError(f"Checkpoint '{path}' does not exist, run the train command first", key="checkpoint")
    return ModelCheckpoint.load(path)


def cmd_synth(run, args):
    data_root = Path(run.paths.data_root)
    if data_root.name != "images":
        raise ConfigurationError(
            f"synth writes images/ and masks/ side by side, paths.data_root must end with 'images', got '{data_root}'",
            key="paths.data_root",
        )
    generate_corpus(data_root.parent, run.synth, force=args.force)


def cmd_prepare(run, args):
    data_root = Path(run.paths.data_root)
    if not data_root.is_dir():
        raise FileNotFoundError(f"Data root '{data_root}' does not exist")
    out = _output_dir(run) / "prepare"
    manifest = load_manifest(data_root)
    splits = stratified_split(manifest, run.split)
    splits.write(out)
    _, derivatives = training_records(run.train_config(len(manifest.classes)), splits)
    report = verify_no_leakage(splits, derivatives)
    (out / "leakage_report.json").write_text(report.to_json())
    _write_json(out / "counts.json", {"raw": manifest.counts, "splits": splits.counts()})
    if not report.passed:
        raise AuditFailed(f"Leakage audit failed: {list(report.violations)[:10]}")


def cmd_train(run, args):
    splits = _load_splits(run)
    config = run.train_config(len(splits.classes))
    out = _output_dir(run) / "train"
    timed = time_training(config, splits)
    path = timed.checkpoint.save(out / "model.ckpt")
    (out / "history.json").write_text(timed.history.to_json())
    _write_json(
        out / "timing.json",
        {"train_time_s": timed.train_time_s, "started_at": timed.started_at, "finished_at": timed.finished_at},
    )
    plot_history(timed.history, out / "history.png")
    logger.info("Best epoch %d, checkpoint written to %s", timed.history.best_epoch, path)


def cmd_cv(run, args):
    manifest = load_manifest(run.paths.data_root)
    config = run.train_config(len(manifest.classes))
    result = kfold_cv(manifest, run.cv.k, config, jobs=run.cv.jobs)
    (_output_dir(run) / "cv").mkdir(parents=True, exist_ok=True)
    (_output_dir(run) / "cv" / "cv_result.json").write_text(result.to_json())


def cmd_ablate(run, args):
    splits = _load_splits(run)
    config = run.train_config(len(splits.classes))
    factors = [AblationFactor[name.upper()] for name in run.ablation.factors]
    table = run_ablation(config, splits, factors, jobs=run.ablation.jobs)
    out = _output_dir(run) / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(table.to_markdown(), encoding="utf-8")
    (out / "ablation.json").write_text(table.to_json())


def cmd_eval(run, args):
    splits = _load_splits(run)
    checkpoint = _load_checkpoint(run, args)
    classes = list(splits.classes)
    metrics, preds, scores = evaluate(checkpoint, splits.test, run.preprocess, run.training.batch_size_eval, classes)
    labels = [classes.index(r.class_label) for r in splits.test]
    matrix = confusion(preds, labels, len(classes), classes)
    curves = roc_pr_auc(scores, labels, classes=classes)
    report = EvalReport(checkpoint.spec.display_name, metrics, matrix, curves)

    out = _output_dir(run) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report_dict = report.to_dict()
    report_dict["size_mb"] = len(checkpoint.to_bytes()) / 2 ** 20
    _write_json(out / "report.json", report_dict)
    (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    write_curves_csv(curves, out / "curves.csv")
    plot_roc_pr(curves, out / "roc_pr.png")
    plot_confusion(matrix, out / "confusion.png")
    logger.info("Test accuracy %.4f, macro-F1 %.4f", metrics.accuracy, metrics.macro_f1)


def cmd_gradcam(run, args):
    splits = _load_splits(run)
    checkpoint = _load_checkpoint(run, args)
    classes = list(splits.classes)
    picked = []
    for name in classes:
        picked += [r for r in splits.test if r.class_label == name][: run.gradcam.per_class]
    model = checkpoint.build()
    out = _output_dir(run) / "gradcam"
    results = render_gallery(model, picked, classes, run.preprocess, out, run.gradcam.layer, run.gradcam.target)
    summary = [
        {
            "provenance_id": record.provenance_id,
            "class_label": record.class_label,
            "target_class": classes[heatmap.target_class],
            "zero_activation": heatmap.zero_activation,
        }
        for record, heatmap in results
    ]
    _write_json(out / "gradcam.json", {"layer": run.gradcam.layer, "heatmaps": summary})


def _baseline_entry(name, num_classes, run):
    try:
        backbone = Backbone[name.upper()]
    except KeyError:
        raise ConfigurationError(f"Unknown baseline backbone '{name}'", key="benchmark.baselines")
    spec = ModelSpec(BackboneSpec(backbone), use_cbam=False, dropout_p=0.0, num_classes=num_classes)
    try:
        model = build_model(spec)
    except BackboneUnavailableError as e:
        logger.warning("Baseline %s skipped: %s", backbone.name, e)
        return {"model": spec.display_name, "skipped": True, "reason": str(e)}
    result = _measure(run, ModelCheckpoint.from_model(model))
    return {"model": spec.display_name, "skipped": False, "parameters": count_parameters(model), **result.to_dict()}


def _measure(run, checkpoint):
    section = run.benchmark
    result = measure_fps(
        checkpoint,
        section.batch_size,
        section.warmup_iters,
        section.timed_iters,
        image_size=run.preprocess.target_size,
        device=section.device,
    )
    if section.hardware_label:
        result.hardware_label = section.hardware_label
    return result


def cmd_bench(run, args):
    checkpoint = _load_checkpoint(run, args)
    result = _measure(run, checkpoint)
    timing_path = _output_dir(run) / "train" / "timing.json"
    if timing_path.is_file():
        result.train_time_s = _read_json(timing_path)["train_time_s"]
    out = _output_dir(run) / "bench"
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.json").write_text(result.to_json())

    num_classes = checkpoint.spec.num_classes
    baselines = [_baseline_entry(name, num_classes, run) for name in run.benchmark.baselines]
    _write_json(out / "baselines.json", baselines)
    entries = [(checkpoint.spec.display_name, result.fps, result.size_mb, result.train_time_s)]
    entries += [(b["model"], b.get("fps"), b.get("size_mb"), None) for b in baselines]
    plot_efficiency(entries, out / "efficiency.png")


def _rows_of_run(directory):
    directory = Path(directory)
    rows = []
    eval_path = directory / "eval" / "report.json"
    if eval_path.is_file():
        report = _read_json(eval_path)
        bench_path = directory / "bench" / "benchmark.json"
        bench = _read_json(bench_path) if bench_path.is_file() else {}
        rows.append(
            ComparisonRow(
                report["model"],
                report["metrics"]["accuracy"],
                report["metrics"]["macro_f1"],
                bench.get("fps"),
                bench.get("size_mb", report.get("size_mb")),
            )
        )
    baselines_path = directory / "bench" / "baselines.json"
    if baselines_path.is_file():
        for baseline in _read_json(baselines_path):
            if baseline["skipped"]:
                rows.append(ComparisonRow(baseline["model"], note=baseline.get("reason", "")))
    return rows


def _ablation_rows(directory):
    path = Path(directory) / "ablate" / "ablation.json"
    if not path.is_file():
        return []
    rows = _read_json(path).get(AblationFactor.CBAM.value[1])
    if not rows:
        return []
    off = rows[0]
    return [ComparisonRow(f"{off['label']} (ablation)", off["accuracy"], off["macro_f1"], size_mb=off["size_mb"])]


def _default_baseline(other_rows, ablation_rows):
    """
    First measured row of the other runs, else the attention-off cell of the ablation
    """
    for row in list(other_rows) + list(ablation_rows):
        if not row.skipped:
            return row.model
    return None


def cmd_report(run, args):
    directory = _output_dir(run)
    own_rows = _rows_of_run(directory)
    other_rows = [row for other in args.run for row in _rows_of_run(other)]
    ablation_rows = _ablation_rows(directory)
    rows = own_rows + other_rows + ablation_rows
    if run.report.include_published:
        rows += list(PUBLISHED_REFERENCE_ROWS)
    if not rows:
        raise DatasetError("Nothing to report, run eval (or bench) first")
    baseline = run.report.baseline or _default_baseline(other_rows, ablation_rows)
    report = emit_comparison_report(rows, baseline)
    out = directory / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(report.to_json())

    sections = ["# Comparison", "", report.to_markdown()]
    ablation_path = _output_dir(run) / "ablate" / "ablation.md"
    if ablation_path.is_file():
        sections += ["# Ablations", "", ablation_path.read_text(encoding="utf-8")]
    if run.report.include_published:
        sections += ["Rows marked (published) are archived reference values, not measured by this run.", ""]
    (out / "report.md").write_text("\n".join(sections), encoding="utf-8")


HANDLERS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "cv": cmd_cv,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "bench": cmd_bench,
    "report": cmd_report,
}


def _exit_code(error):
    if isinstance(error, (ProtocolViolation, AuditFailed)):
        return EXIT_PROTOCOL
    if isinstance(error, (ConfigurationError, FileNotFoundError, DatasetError, BackboneUnavailableError)):
        return EXIT_USAGE
    return EXIT_RUNTIME


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run = resolve_config(args)
    except ConfigurationError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_USAGE

    output_dir = _output_dir(run)
    configure_logging(output_dir, args.verbose)
    run.save(output_dir / "resolved_config.yaml")

    status_path = output_dir / args.command / "status.json"
    try:
        HANDLERS[args.command](run, args)
    except Exception as e:
        code = _exit_code(e)
        logger.error("%s failed: %s", args.command, e)
        logger.debug(traceback.format_exc())
        _write_json(status_path, {"status": "failed", "error": str(e), "exit_code": code})
        return code
    _write_json(status_path, {"status": "ok", "error": None, "exit_code": EXIT_OK})
    return EXIT_OK


def console_main():
    sys.exit(main())
