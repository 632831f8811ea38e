"""Command-line entry point: synth-bench, synth-cohort, fit, transfer, predict.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric failure.
"""

import argparse
import contextlib
import csv
import io
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, serialize
from .activity import estimate_subject
from .agereg import (
    AgeRegressionError,
    activity_features,
    age_model_from_dict,
    age_model_to_dict,
    append_ledger,
    bootstrap_mae,
    fit_age_model,
    predict_age,
    transfer_evaluate,
)
from .data import DataError, compute_covariance, load_cohort, split_cohort, write_cohort
from .models import fit, normalize_regime, select_k
from .models.select import SelectionError
from .models.types import ConfigError, DivergenceError, NumericError, ValidationError
from .synth import (
    SynthConfig,
    SynthConfigError,
    rows_to_csv,
    run_study,
    sample_cohort,
    summarize,
    summary_to_csv,
)

log = logging.getLogger("brainage")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CONFIG_ERRORS = (
    cfgmod.ConfigFieldError,
    ConfigError,
    ValidationError,
    DataError,
    serialize.SchemaError,
    AgeRegressionError,
    SynthConfigError,
)
NUMERIC_ERRORS = (DivergenceError, NumericError, SelectionError, np.linalg.LinAlgError)


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(str(exc))
        self.stage = stage
        self.exc = exc


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except (*CONFIG_ERRORS, *NUMERIC_ERRORS) as exc:
        raise StageError(name, exc) from exc


def _report_error(stage_name, exc, code):
    report = {
        "status": "error",
        "exit_code": code,
        "stage": stage_name,
        "error": type(exc).__name__,
        "message": str(exc),
    }
    field = getattr(exc, "field", None)
    if field is not None:
        report["field"] = field
    print(json.dumps(report, sort_keys=True), file=sys.stderr)
    return code


def _provenance(command, cfg, inputs):
    input_hashes = {name: cfgmod.hash_path(path) for name, path in sorted(inputs.items())}
    run_id = cfgmod.hash_config({"command": command, "config": cfg, "inputs": input_hashes})[:16]
    return {
        "command": command,
        "run_id": run_id,
        "package_version": __version__,
        "config": cfg,
        "input_hashes": input_hashes,
    }


def _write_json(path, doc):
    serialize.save_json(path, doc)


def _sha256_text(text):
    import hashlib

    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# synth-bench


def _base_config(cfg, seed):
    base = dict(cfg["base"])
    base["beta_range"] = tuple(base["beta_range"])
    return SynthConfig(seed=seed, **base)


def cmd_synth_bench(args):
    with stage("config"):
        cfg = cfgmod.load_config("synth-bench", args.config, {"seed": args.seed, "n_jobs": args.jobs})
        base = _base_config(cfg, cfg["seed"])
        hyper = cfgmod.optimizer_settings(cfg)
    out = Path(args.out)
    inputs = {"config": args.config} if args.config else {}
    prov = _provenance("synth-bench", cfg, inputs)
    with stage("study"):
        rows = run_study(
            cfg["axis"],
            cfg["grid"],
            cfg["regimes"],
            cfg["repeats"],
            base,
            n_held_out=cfg["n_held_out"],
            hyper=hyper,
            n_jobs=cfg["n_jobs"],
        )
    results_csv = rows_to_csv(rows)
    summary_csv = summary_to_csv(summarize(rows))
    serialize.atomic_write_text(out / "results.csv", results_csv)
    serialize.atomic_write_text(out / "summary.csv", summary_csv)
    n_failed = sum(r.status != "ok" for r in rows)
    manifest = dict(prov)
    manifest["artifacts"] = {
        "results.csv": _sha256_text(results_csv),
        "summary.csv": _sha256_text(summary_csv),
    }
    manifest["n_rows"] = len(rows)
    manifest["n_failed"] = n_failed
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(rows)} rows ({n_failed} failed) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth-cohort


def cmd_synth_cohort(args):
    with stage("config"):
        overrides = {"seed": args.seed}
        cfg = cfgmod.load_config("synth-cohort", args.config, overrides)
        base = dict(cfg["base"])
        if args.n_subjects is not None:
            base["n_subjects"] = args.n_subjects
        if args.n_obs is not None:
            base["n_obs_per_subject"] = args.n_obs
        cfg["base"] = base
        cfgmod.validate("synth-cohort", cfg)
        config = _base_config(cfg, cfg["seed"])
    with stage("generate"):
        cohort = sample_cohort(config, subject_offset=args.subject_offset)
    out = Path(args.out)
    write_cohort(cohort.subjects, out)
    truth = {
        "kind": "synthetic_ground_truth",
        "config": cfg,
        "subject_offset": args.subject_offset,
        "loading": cohort.ground_truth_loading.values.tolist(),
        "beta": cohort.ground_truth_beta.tolist(),
        "activities": {sid: g.tolist() for sid, g in cohort.true_activities.items()},
        "noise": cohort.true_noise,
    }
    _write_json(Path(args.truth) if args.truth else out.parent / f"{out.name}_truth.json", truth)
    print(f"wrote {len(cohort.subjects)} subjects to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _require_ages(subjects):
    missing = [s.subject_id for s in subjects if s.age is None]
    if missing:
        raise ValidationError(f"age missing for subject(s): {', '.join(missing)}")


def cmd_fit(args):
    with stage("config"):
        cfg = cfgmod.load_config("fit", args.config, {"regime": args.regime, "seed": args.seed})
        if args.k is not None:
            cfg["k"], cfg["k_grid"] = args.k, None
        elif args.k_grid is not None:
            cfg["k_grid"] = cfgmod.parse_k_grid(args.k_grid)
        cfgmod.validate("fit", cfg)
        regime = normalize_regime(cfg["regime"])
        hyper = cfgmod.optimizer_settings(cfg)
    out = Path(args.out)
    inputs = {"data": args.data}
    if args.config:
        inputs["config"] = args.config
    prov = _provenance("fit", cfg, inputs)

    with stage("ingest"):
        cohort = load_cohort(args.data, cfg["format"])
        _require_ages(cohort.subjects)
        cohort = split_cohort(cohort.with_covariances(), cfg["split"], cfg["seed"])
    train = cohort.covariance_triples("train")
    val = cohort.covariance_triples("validation")

    selection = None
    if cfg["k_grid"]:
        with stage("select"):
            k, table = select_k(regime, cfg["k_grid"], train, val, hyper)
        selection = table
        for row in table:
            log.info("k=%d validation log-likelihood=%s status=%s", row.k, row.validation_log_likelihood, row.status)
    else:
        k = cfg["k"]

    with stage("fit"):
        model = fit(regime, k, train, hyper)
    with stage("regress"):
        train_ids = [t[0] for t in train]
        ages = np.array([cohort.by_id(s).age for s in train_ids])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            age_model = fit_age_model(model.activity_matrix(train_ids), ages, cfg["use_intercept"])
        for w in caught:
            log.warning("%s", w.message)
    with stage("evaluate"):
        test_subjects = cohort.split("test")
        test_cohort = replace(cohort, subjects=tuple(test_subjects), split_labels={})
        features = activity_features(model, test_cohort)
        predictions = np.atleast_1d(predict_age(age_model, features))
        true = np.array([s.age for s in test_subjects])
        bs = cfg["bootstrap"]
        report = bootstrap_mae(predictions, true, bs["subset_size"], bs["n_bootstrap"], cfg["seed"])

    model_doc = serialize.model_to_dict(model)
    model_doc["provenance"] = prov
    model_doc["split"] = {sid: cohort.split_labels[sid] for sid in sorted(cohort.split_labels)}
    age_doc = age_model_to_dict(age_model)
    age_doc["provenance"] = prov
    report_doc = {"kind": "eval_report", "dataset": "test", "regime": regime, "k": int(k)}
    report_doc.update(report.to_dict())
    report_doc["provenance"] = prov
    _write_json(out / "model.json", model_doc)
    _write_json(out / "age_model.json", age_doc)
    _write_json(out / "eval_report.json", report_doc)
    pred_rows = [(s.subject_id, p, s.age) for s, p in zip(test_subjects, predictions)]
    serialize.atomic_write_text(out / "test_predictions.csv", _predictions_csv(pred_rows, features))
    if selection is not None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "validation_log_likelihood", "status", "message"])
        for row in selection:
            ll = "" if row.validation_log_likelihood is None else repr(row.validation_log_likelihood)
            writer.writerow([row.k, ll, row.status, row.message])
        serialize.atomic_write_text(out / "selection.csv", buf.getvalue())
    append_ledger(out / "results_ledger.csv", prov["run_id"], regime, k, "test", report)
    print(json.dumps({"k": int(k), "mae_mean": report.mae_mean, "mae_std": report.mae_std}))
    return EXIT_OK


def _predictions_csv(rows, features):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    k = features.shape[1]
    writer.writerow(["subject_id", "predicted_age", "age"] + [f"g_{j + 1}" for j in range(k)])
    for (sid, pred, age), g in zip(rows, features):
        writer.writerow([sid, repr(float(pred)), "" if age is None else repr(float(age))] + [repr(float(x)) for x in g])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# transfer / predict


def _load_models(args):
    model_doc = serialize.load_json(args.model)
    age_doc = serialize.load_json(args.age_model)
    return serialize.model_from_dict(model_doc), age_model_from_dict(age_doc)


def cmd_transfer(args):
    with stage("config"):
        cfg = cfgmod.load_config("transfer", args.config, {"seed": args.seed, "dataset": args.dataset})
        if args.subset_size is not None:
            cfg["bootstrap"]["subset_size"] = args.subset_size
        if args.n_bootstrap is not None:
            cfg["bootstrap"]["n_bootstrap"] = args.n_bootstrap
        cfgmod.validate("transfer", cfg)
    with stage("load-model"):
        model, age_model = _load_models(args)
    inputs = {"model": args.model, "age_model": args.age_model, "data": args.data}
    prov = _provenance("transfer", cfg, inputs)
    with stage("ingest"):
        cohort = load_cohort(args.data, cfg["format"])
        _require_ages(cohort.subjects)
    with stage("evaluate"):
        bs = cfg["bootstrap"]
        report = transfer_evaluate(model, age_model, cohort, bs["subset_size"], bs["n_bootstrap"], cfg["seed"])
    dataset = cfg["dataset"] or Path(args.data).name
    out = Path(args.out)
    doc = {"kind": "eval_report", "dataset": dataset, "regime": model.regime, "k": model.k}
    doc.update(report.to_dict())
    doc["provenance"] = prov
    _write_json(out / "transfer_report.json", doc)
    append_ledger(out / "results_ledger.csv", prov["run_id"], model.regime, model.k, dataset, report)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_predict(args):
    with stage("config"):
        cfg = cfgmod.load_config("predict", args.config, {})
    with stage("load-model"):
        model, age_model = _load_models(args)
    with stage("ingest"):
        cohort = load_cohort(args.data, cfg["format"])
    with stage("predict"):
        if cohort.p != model.p:
            raise StageError("predict", ValidationError(f"cohort has p={cohort.p} but the model was fitted with p={model.p}"))
        ests = [estimate_subject(model.loading, compute_covariance(s), s.subject_id) for s in cohort.subjects]
        features = np.vstack([e.clamped_activities for e in ests])
        preds = np.atleast_1d(predict_age(age_model, features))
    text = _predictions_csv([(s.subject_id, p, s.age) for s, p in zip(cohort.subjects, preds)], features)
    if args.out:
        serialize.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="brainage", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-bench", help="run the synthetic recovery/prediction study")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="parallel workers (results are order-independent)")
    p.set_defaults(func=cmd_synth_bench)

    p = sub.add_parser("synth-cohort", help="write a synthetic cohort in csv_dir layout")
    p.add_argument("--config", help="JSON configuration (base generator parameters)")
    p.add_argument("--out", required=True, help="cohort directory to create")
    p.add_argument("--truth", help="where to write the ground-truth JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-subjects", type=int)
    p.add_argument("--n-obs", type=int)
    p.add_argument("--subject-offset", type=int, default=0, help="first subject stream index")
    p.set_defaults(func=cmd_synth_cohort)

    p = sub.add_parser("fit", help="split, (select k,) fit, regress and evaluate on a cohort")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--out", required=True, help="output directory")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--k", type=int)
    group.add_argument("--k-grid", help="candidate k values, a..b or comma list")
    p.add_argument("--regime", choices=["fa", "pca", "nnpca", "mcf", "mha"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("transfer", help="evaluate frozen models on an unseen cohort")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--model", required=True)
    p.add_argument("--age-model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".", help="directory for the report and results ledger")
    p.add_argument("--dataset", help="dataset label for the ledger (default: data directory name)")
    p.add_argument("--subset-size", type=int)
    p.add_argument("--n-bootstrap", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("predict", help="predict ages for a cohort (ages optional)")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--model", required=True)
    p.add_argument("--age-model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="predictions CSV (default: stdout)")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except StageError as err:
        code = EXIT_NUMERIC if isinstance(err.exc, NUMERIC_ERRORS) else EXIT_CONFIG
        return _report_error(err.stage, err.exc, code)
    except CONFIG_ERRORS as exc:
        return _report_error("unknown", exc, EXIT_CONFIG)
    except NUMERIC_ERRORS as exc:
        return _report_error("unknown", exc, EXIT_NUMERIC)


if __name__ == "__main__":
    raise SystemExit(main())
