"""Command-line entry point: ``autosmart train | score | gen-data``."""

import time

# taken before the heavy imports so the budget covers interpreter start-up work
_PROCESS_START = time.monotonic()

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

log = logging.getLogger("autosmart")


def _read_predictions(path) -> np.ndarray:
    text = Path(path).read_text().split()
    return np.array([float(v) for v in text], dtype=np.float64)


def cmd_train(args) -> int:
    from .controller import BudgetTracker
    from .ingest import parse_info
    from .pipeline import PipelineConfig, env_mem_bytes, format_predictions, run_pipeline, set_workers

    info = parse_info(Path(args.config).read_text(encoding="utf-8"))
    if args.budget_s is not None:
        info.time_budget_s = float(args.budget_s)
    info.mem_budget_bytes = env_mem_bytes(info.mem_budget_bytes)
    workers = set_workers(args.workers)
    tracker = BudgetTracker(info.time_budget_s, info.mem_budget_bytes, start=_PROCESS_START)
    result = run_pipeline(info, args.train, args.test, tracker, PipelineConfig(seed=args.seed))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_predictions(result.predictions))
    phase_log = out.with_name(out.name + ".phases.tsv")
    tracker.dump_phases(phase_log)
    if result.reports:
        from .feateng import dump_reports
        dump_reports(result.reports, out.with_name(out.name + ".selection.tsv"))
    manifest = {
        "config": str(Path(args.config).resolve()),
        "train": str(Path(args.train).resolve()),
        "test": str(Path(args.test).resolve()),
        "output": str(out.resolve()),
        "seed": args.seed,
        "workers": workers,
        "time_budget_s": info.time_budget_s,
        "mem_budget_bytes": info.mem_budget_bytes,
        "phase_log": str(phase_log.resolve()),
        "n_predictions": int(len(result.predictions)),
        "n_models": result.n_models,
        "n_rounds": result.n_rounds,
        "learning_rate": result.learning_rate,
        "n_features": len(result.feature_names),
        "skipped_stages": result.skipped_stages,
        "fallback": result.fallback,
        "elapsed_s": round(tracker.elapsed(), 3),
    }
    out.with_name(out.name + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if result.fallback:
        log.warning("predictions come from the %s fallback", result.fallback)
    return 0


def cmd_score(args) -> int:
    from .evaluation import EvaluationRecord, auc
    from .ingest import read_labels

    preds = _read_predictions(args.pred)
    labels = read_labels(args.labels)
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    if (args.auc_base is None) != (args.auc_max is None):
        raise ValueError("--auc-base and --auc-max go together")
    record = EvaluationRecord(auc(labels, preds), args.auc_base, args.auc_max)
    print(record.format())
    return 0


def cmd_gen_data(args) -> int:
    from .ingest import SyntheticSpec, generate_synthetic, write_train_test

    doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    test_fraction = float(doc.pop("test_fraction", 0.2))
    spec = SyntheticSpec.from_dict(doc)
    write_train_test(generate_synthetic(spec, args.seed), args.out, test_fraction)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="autosmart", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a bundle and predict the test main table")
    t.add_argument("--config", required=True, help="info.json describing the bundle")
    t.add_argument("--train", required=True, help="directory with tables and labels.tsv")
    t.add_argument("--test", required=True, help="directory with the test main table")
    t.add_argument("--out", required=True, help="prediction file, one probability per line")
    t.add_argument("--budget-s", type=float, default=None, help="override time_budget_s")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--workers", type=int, default=None,
                   help="kernel threads (default: all available)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="AUC of a prediction file, optionally rescaled")
    s.add_argument("--pred", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--auc-base", type=float, default=None)
    s.add_argument("--auc-max", type=float, default=None)
    s.set_defaults(func=cmd_score)

    g = sub.add_parser("gen-data", help="write a synthetic train/test bundle")
    g.add_argument("--spec", required=True, help="JSON object of generator settings")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one structured line instead of a traceback
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
