"""Command-line surface: simulate, calibrate, evaluate, riskcov, export.

Every command is a pure function of its input files and flags; reruns with
the same seed produce byte-identical outputs. All randomness flows from the
single --seed flag through named substreams, so stages can be re-run
independently. Exit status is 0 on success, 1 with a single-line
``error: ...`` message otherwise.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass

from .calibrators import (
    FitConfig,
    GbdtConfig,
    Method,
    Scope,
    fit_forecaster,
    fit_gradient_calibrator,
    load_model,
    save_model,
)
from .core import Dataset, Prediction, RngState, Split, load_dataset, save_dataset
from .gumbel import AnnealSchedule
from .metrics import aurc, compute_ece, reliability_rows, risk_coverage
from .objectives import nll, predict_dataset
from .simulator import SimulatorConfig, generate, save_ground_truth

__all__ = ["JobConfig", "cmd_calibrate", "cmd_evaluate", "cmd_export", "cmd_riskcov", "cmd_simulate", "main"]


@dataclass(slots=True)
class JobConfig:
    """Parsed command-line job; field names mirror the long flags."""

    command: str
    args: argparse.Namespace


def _require_dir(path: str) -> None:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"output directory does not exist: {path}")


def _write_lines(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in lines:
            fh.write(line + "\n")


def _write_predictions(path: str, predictions: list[Prediction]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_id", "answer_key", "confidence", "correct"])
        for p in predictions:
            writer.writerow([p.query_id, p.answer_key, repr(p.confidence), int(p.correct)])


def _read_predictions(path: str) -> list[Prediction]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["query_id", "answer_key", "confidence", "correct"]:
            raise ValueError(f"unrecognized predictions header in {path}")
        for row in reader:
            out.append(
                Prediction(
                    query_id=row[0],
                    answer_key=row[1],
                    confidence=float(row[2]),
                    correct=bool(int(row[3])),
                )
            )
    if not out:
        raise ValueError(f"no predictions in {path}")
    return out


def _riskcov_rows(predictions: list[Prediction]) -> list[str]:
    rows = ["threshold,coverage,risk"]
    for pt in risk_coverage(predictions):
        rows.append(f"{pt.threshold:.12g},{pt.coverage:.12g},{pt.risk:.12g}")
    return rows


def _metric_rows(predictions: list[Prediction], m_bins: int) -> list[str]:
    report = compute_ece(predictions, m_bins)
    return [
        "metric,value",
        f"ece,{report.ece:.12g}",
        f"aurc,{aurc(predictions):.12g}",
    ], report


def cmd_simulate(config: JobConfig) -> int:
    a = config.args
    _require_dir(a.out)
    sim = SimulatorConfig(
        n_examples=a.n,
        pool_size=a.pool_size,
        k=a.k,
        answers_per_doc=a.answers_per_doc,
        retriever_sharpness=a.retriever_sharpness,
        reader_sharpness=a.reader_sharpness,
        retriever_distortion=a.retriever_distortion,
        reader_distortion=a.reader_distortion,
        p_unanswerable=a.p_unanswerable,
        seed=a.seed,
        vocab_size=a.vocab_size,
        offtopic_boost=a.offtopic_boost,
        unanswerable_flatness=a.unanswerable_flatness,
    )
    dataset, truth = generate(sim, RngState(a.seed).stream("simulate"))
    n = len(dataset.examples)
    n_calib, n_valid = n // 2, n // 4
    cuts = {
        Split.CALIB: dataset.examples[:n_calib],
        Split.VALID: dataset.examples[n_calib : n_calib + n_valid],
        Split.TEST: dataset.examples[n_calib + n_valid :],
    }
    for split, examples in cuts.items():
        save_dataset(Dataset(examples, split), os.path.join(a.out, f"{split.value}.jsonl"))
    save_ground_truth(truth, os.path.join(a.out, "ground_truth.jsonl"))
    print(f"wrote {n_calib}/{n_valid}/{n - n_calib - n_valid} examples to {a.out}")
    return 0


def cmd_calibrate(config: JobConfig) -> int:
    a = config.args
    calib = load_dataset(a.calib, Split.CALIB)
    rng = RngState(a.seed).stream("fit")
    if a.method == Method.FORECASTER.value:
        model = fit_forecaster(
            calib,
            interest_size=a.interest_size,
            config=GbdtConfig(
                rounds=a.gbdt_rounds,
                max_depth=a.gbdt_max_depth,
                learning_rate=a.gbdt_learning_rate,
                min_leaf=a.gbdt_min_leaf,
            ),
        )
    else:
        model = fit_gradient_calibrator(
            calib,
            scope=a.scope,
            method=a.method,
            config=FitConfig(
                step_size=a.step_size,
                epochs=a.epochs,
                mc_samples=a.mc_samples,
                max_examples=a.max_examples,
            ),
            schedule=AnnealSchedule(a.t_start, a.t_end, a.anneal_steps),
            rng=rng,
        )
    save_model(model, a.model_out)
    log_lines = [f"method={a.method}", f"scope={model.scope.value}", f"seed={a.seed}"]
    if a.valid:
        valid = load_dataset(a.valid, Split.VALID)
        predictions = predict_dataset(valid, model)
        report = compute_ece(predictions, a.m_bins)
        log_lines += [
            f"valid_nll={nll(valid, model):.12g}",
            f"valid_ece={report.ece:.12g}",
            f"valid_aurc={aurc(predictions):.12g}",
        ]
    if a.log_out:
        _write_lines(a.log_out, log_lines)
    for line in log_lines:
        print(line)
    return 0


def cmd_evaluate(config: JobConfig) -> int:
    a = config.args
    _require_dir(a.out_dir)
    model = load_model(a.model)
    data = load_dataset(a.data, Split.TEST)
    predictions = predict_dataset(data, model)
    scalar_rows, report = _metric_rows(predictions, a.m_bins)
    _write_lines(os.path.join(a.out_dir, "scalars.csv"), scalar_rows)
    _write_lines(os.path.join(a.out_dir, "reliability.csv"), reliability_rows(report))
    _write_lines(os.path.join(a.out_dir, "risk_coverage.csv"), _riskcov_rows(predictions))
    _write_predictions(os.path.join(a.out_dir, "predictions.csv"), predictions)
    print(f"ece={report.ece:.6g} aurc={aurc(predictions):.6g} n={report.n}")
    return 0


def cmd_riskcov(config: JobConfig) -> int:
    a = config.args
    predictions = _read_predictions(a.predictions)
    _write_lines(a.out, _riskcov_rows(predictions))
    print(f"wrote {len(predictions)} risk-coverage points to {a.out}")
    return 0


def cmd_export(config: JobConfig) -> int:
    a = config.args
    _require_dir(a.out_dir)
    predictions = _read_predictions(a.predictions)
    scalar_rows, report = _metric_rows(predictions, a.m_bins)
    _write_lines(os.path.join(a.out_dir, "scalars.csv"), scalar_rows)
    _write_lines(os.path.join(a.out_dir, "reliability.csv"), reliability_rows(report))
    _write_lines(os.path.join(a.out_dir, "risk_coverage.csv"), _riskcov_rows(predictions))
    print(f"exported metrics for {report.n} predictions to {a.out_dir}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rrcal", description="Calibration toolkit for retriever-reader pipelines"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate synthetic splits plus ground truth")
    sim.add_argument("--out", required=True, help="existing output directory")
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--pool-size", type=int, default=10)
    sim.add_argument("--k", type=int, default=5)
    sim.add_argument("--answers-per-doc", type=int, default=4)
    sim.add_argument("--retriever-sharpness", type=float, default=2.0)
    sim.add_argument("--reader-sharpness", type=float, default=2.0)
    sim.add_argument("--retriever-distortion", type=float, default=1.0)
    sim.add_argument("--reader-distortion", type=float, default=1.0)
    sim.add_argument("--p-unanswerable", type=float, default=0.0)
    sim.add_argument("--vocab-size", type=int, default=None)
    sim.add_argument("--offtopic-boost", type=float, default=1.0)
    sim.add_argument("--unanswerable-flatness", type=float, default=1.0)
    sim.add_argument("--seed", type=int, required=True)

    cal = sub.add_parser("calibrate", help="fit a calibrator on the calib split")
    cal.add_argument("--calib", required=True)
    cal.add_argument("--valid", default=None)
    cal.add_argument("--method", required=True, choices=[m.value for m in Method])
    cal.add_argument("--scope", default=Scope.JOINT.value, choices=[s.value for s in Scope])
    cal.add_argument("--model-out", required=True)
    cal.add_argument("--log-out", default=None)
    cal.add_argument("--epochs", type=int, default=200)
    cal.add_argument("--step-size", type=float, default=0.05)
    cal.add_argument("--mc-samples", type=int, default=1)
    cal.add_argument("--max-examples", type=int, default=None)
    cal.add_argument("--t-start", type=float, default=2.0)
    cal.add_argument("--t-end", type=float, default=0.2)
    cal.add_argument("--anneal-steps", type=int, default=200)
    cal.add_argument("--interest-size", type=int, default=3)
    cal.add_argument("--gbdt-rounds", type=int, default=100)
    cal.add_argument("--gbdt-max-depth", type=int, default=3)
    cal.add_argument("--gbdt-learning-rate", type=float, default=0.1)
    cal.add_argument("--gbdt-min-leaf", type=int, default=5)
    cal.add_argument("--m-bins", type=int, default=10)
    cal.add_argument("--seed", type=int, required=True)
    cal.add_argument("--threads", type=int, default=1)

    ev = sub.add_parser("evaluate", help="metrics CSVs for a model on a split")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out-dir", required=True)
    ev.add_argument("--m-bins", type=int, default=10)
    ev.add_argument("--threads", type=int, default=1)

    rc = sub.add_parser("riskcov", help="risk-coverage rows from a predictions dump")
    rc.add_argument("--predictions", required=True)
    rc.add_argument("--out", required=True)

    ex = sub.add_parser("export", help="plot-ready CSVs from a predictions dump")
    ex.add_argument("--predictions", required=True)
    ex.add_argument("--out-dir", required=True)
    ex.add_argument("--m-bins", type=int, default=10)

    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "riskcov": cmd_riskcov,
    "export": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    job = JobConfig(command=args.command, args=args)
    try:
        return _COMMANDS[args.command](job)
    except (ValueError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
