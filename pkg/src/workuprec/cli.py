"""Command-line front end: generate, train, evaluate, recommend.

Every command takes an explicit seed (no wall-clock seeding), merges an
optional JSON config file under its flags, writes output files atomically
(temp name, then rename), and exits nonzero on any error. Running the same
command twice with the same inputs produces byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .baselines import (
    Checklist,
    checklist_predict,
    load_checklist,
    pmf_fit,
    pmf_predict,
    svd_fit,
    svd_predict,
)
from .cohort import (
    COHORT_FORMAT_VERSION,
    Cohort,
    load_cohort,
    load_vocab,
    save_cohort,
    save_vocab,
    split_cohort,
    vocab_sha256,
)
from .errors import EvaluationError, FormatError, ShapeError, TrainingError, UsageError
from .metrics import (
    EXAMPLE_REPORT_THRESHOLD,
    MetricsReport,
    PredictionSet,
    compute_report,
    example_report,
    top_k_mask,
    write_auroc_csv,
    write_policy_csv,
    write_pr_csv,
    write_reports_json,
)
from .models import (
    BUNDLE_FORMAT_VERSION,
    ModelBundle,
    load_bundle,
    predict_batch,
    save_bundle,
    stacked_inputs,
    train_aggregate,
    train_base_models,
    train_ensemble,
)
from .nn import MODEL_FORMAT_VERSION, TrainConfig
from .synth import GeneratorConfig, generate

MODEL_CHOICES = ("dm", "ae", "ensemble", "ann", "svd", "pmf")
EVAL_ORDER = ("diagnostic", "autoencoder", "ensemble", "aggregate_ann", "svd", "pmf", "checklist")


def _atomic_write(path: str, write_fn) -> None:
    """Write via a sibling temp file and rename, so failures leave no partials."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        write_fn(tmp_path)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def _merge_config(args: argparse.Namespace, keys: list[str]) -> None:
    """Fill unset flags from the JSON config file, if one was given."""
    if not getattr(args, "config", None):
        return
    with open(args.config, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise FormatError("config file must be a JSON object")
    for key in keys:
        if getattr(args, key, None) is None and key in data:
            setattr(args, key, data[key])


def _require(args: argparse.Namespace, names: list[str]) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required (flag or config file)")


def cmd_gen(args: argparse.Namespace) -> int:
    _merge_config(args, ["patients", "seed", "signal", "specialists", "cohort", "vocab"])
    _require(args, ["patients", "seed", "cohort", "vocab"])
    config = GeneratorConfig(
        num_patients=int(args.patients),
        seed=int(args.seed),
        signal_strength=float(args.signal),
        num_specialists=int(args.specialists),
    )
    cohort = generate(config)
    _atomic_write(args.vocab, lambda p: save_vocab(cohort.vocab, p))
    _atomic_write(args.cohort, lambda p: save_cohort(cohort, p))
    labels = np.stack([p.specialty_procedure_bits for p in cohort.patients])
    print(f"wrote {len(cohort)} patients to {args.cohort}")
    print(f"wrote vocabulary ({cohort.vocab.num_labs} labs, "
          f"{cohort.vocab.num_procedures} procedures, "
          f"{cohort.vocab.num_diagnoses} diagnoses) to {args.vocab}")
    print(f"positive-label rate: {labels.mean():.4f}")
    if config.signal_strength == 0.0:
        print("note: null-signal cohort (labels are independent of all features)")
    return 0


def _load_pair(args: argparse.Namespace) -> Cohort:
    vocab = load_vocab(args.vocab)
    return load_cohort(args.cohort, vocab)


def cmd_train(args: argparse.Namespace) -> int:
    _merge_config(
        args,
        ["cohort", "vocab", "seed", "lr", "epochs", "batch_size", "dropout",
         "train_fraction", "models", "rank", "pmf_lambda", "pmf_lr", "pmf_epochs",
         "bundle", "loss_csv"],
    )
    _require(args, ["cohort", "vocab", "seed", "bundle"])
    cohort = _load_pair(args)
    selected = [m.strip() for m in str(args.models).split(",") if m.strip()]
    unknown = [m for m in selected if m not in MODEL_CHOICES]
    if unknown:
        raise UsageError(f"unknown model selections {unknown}; choose from {MODEL_CHOICES}")
    if "ensemble" in selected:
        selected = sorted(set(selected) | {"dm", "ae"}, key=MODEL_CHOICES.index)

    seed = int(args.seed)
    train, _ = split_cohort(cohort, float(args.train_fraction), seed=seed)
    config = TrainConfig(
        learning_rate=float(args.lr),
        epochs=int(args.epochs),
        batch_size=int(args.batch_size),
        dropout_p=float(args.dropout),
        seed=seed,
    )
    bundle = ModelBundle(
        vocab_hash=vocab_sha256(cohort.vocab),
        train_config=config,
        split_fraction=float(args.train_fraction),
        split_seed=seed,
    )
    loss_rows: list[tuple[str, int, float]] = []

    def record_losses(label: str, history: list[float]) -> None:
        loss_rows.extend((label, epoch, loss) for epoch, loss in enumerate(history))

    if "dm" in selected or "ae" in selected:
        dm, ae = train_base_models(train, config)
        if "dm" in selected:
            bundle.diagnostic = dm
            record_losses("dm", dm.loss_history or [])
        if "ae" in selected:
            bundle.autoencoder = ae
            record_losses("ae", ae.loss_history or [])
    if "ensemble" in selected:
        bundle.ensemble = train_ensemble(
            train, bundle.diagnostic, bundle.autoencoder, config,
            two_fold_stacking=bool(args.two_fold_stacking),
        )
        record_losses("ensemble", bundle.ensemble.loss_history or [])
    if "ann" in selected:
        bundle.aggregate = train_aggregate(train, config)
        record_losses("ann", bundle.aggregate.loss_history or [])
    if "svd" in selected:
        bundle.svd = svd_fit(train, rank=int(args.rank), seed=seed)
    if "pmf" in selected:
        bundle.pmf = pmf_fit(
            train,
            rank=int(args.rank),
            reg_lambda=float(args.pmf_lambda),
            lr=float(args.pmf_lr),
            epochs=int(args.pmf_epochs),
            seed=seed,
        )
        record_losses("pmf", bundle.pmf.objective_history or [])

    _atomic_write(args.bundle, lambda p: save_bundle(bundle, p))
    if args.loss_csv:
        def write_losses(path: str) -> None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write("model,epoch,loss\n")
                for label, epoch, loss in loss_rows:
                    fh.write(f"{label},{epoch},{loss:.6f}\n")

        _atomic_write(args.loss_csv, write_losses)
    digest = hashlib.sha256(open(args.bundle, "rb").read()).hexdigest()
    print(f"trained {', '.join(selected)} on {len(train)} patients")
    print(f"wrote bundle to {args.bundle} (sha256 {digest[:16]})")
    return 0


def _prediction_sets(
    bundle: ModelBundle | None,
    checklist: Checklist | None,
    test: Cohort,
) -> dict[str, PredictionSet]:
    truth = np.stack([p.specialty_procedure_bits for p in test.patients])
    sets: dict[str, PredictionSet] = {}
    if bundle is not None:
        if bundle.diagnostic is not None:
            sets["diagnostic"] = PredictionSet(
                "diagnostic", bundle.diagnostic.scores(test.patients), truth
            )
        if bundle.autoencoder is not None:
            sets["autoencoder"] = PredictionSet(
                "autoencoder", bundle.autoencoder.scores(test.patients), truth
            )
        if bundle.ensemble is not None:
            if bundle.diagnostic is None or bundle.autoencoder is None:
                raise UsageError("bundle has an ensemble but is missing a base model")
            sets["ensemble"] = PredictionSet(
                "ensemble",
                bundle.ensemble.scores(stacked_inputs(bundle.diagnostic, bundle.autoencoder, test.patients)),
                truth,
            )
        if bundle.aggregate is not None:
            sets["aggregate_ann"] = PredictionSet(
                "aggregate_ann", bundle.aggregate.scores(test.patients), truth
            )
        if bundle.svd is not None:
            scores = np.stack(
                [svd_predict(bundle.svd, p.pcp_procedure_bits) for p in test.patients]
            )
            sets["svd"] = PredictionSet("svd", scores, truth)
        if bundle.pmf is not None:
            scores = np.stack(
                [pmf_predict(bundle.pmf, p.pcp_procedure_bits) for p in test.patients]
            )
            sets["pmf"] = PredictionSet("pmf", scores, truth)
    if checklist is not None:
        scores = np.stack(
            [checklist_predict(p.diagnosis_bits, checklist) for p in test.patients]
        )
        sets["checklist"] = PredictionSet("checklist", scores, truth)
    return {label: sets[label] for label in EVAL_ORDER if label in sets}


def cmd_eval(args: argparse.Namespace) -> int:
    _merge_config(
        args,
        ["cohort", "vocab", "bundle", "checklist", "out_dir", "seed",
         "train_fraction", "split_seed", "bootstrap_resamples"],
    )
    _require(args, ["cohort", "vocab", "out_dir", "seed"])
    if args.bundle is None and args.checklist is None:
        raise UsageError("nothing to evaluate: provide --bundle and/or --checklist")
    cohort = _load_pair(args)
    bundle = None
    if args.bundle is not None:
        bundle = load_bundle(args.bundle)
        bundle.require_vocab(cohort.vocab)
        fraction, split_seed = bundle.split_fraction, bundle.split_seed
    else:
        fraction, split_seed = float(args.train_fraction), int(
            args.split_seed if args.split_seed is not None else args.seed
        )
    checklist = None
    if args.checklist is not None:
        checklist = load_checklist(args.checklist, cohort.vocab)
    _, test = split_cohort(cohort, fraction, seed=split_seed)
    sets = _prediction_sets(bundle, checklist, test)

    seed = int(args.seed)
    n_resamples = int(args.bootstrap_resamples)
    reports: list[MetricsReport] = []
    for label, preds in sets.items():
        if label == "checklist":
            # binary scores have a single operating point, not a curve
            report = compute_report(
                preds, thresholds=[0.5], policy_thresholds=[0.5], ks=[],
                n_resamples=n_resamples, seed=seed,
            )
        else:
            report = compute_report(preds, n_resamples=n_resamples, seed=seed)
        reports.append(report)

    example = None
    if test.patients and sets:
        patient = test.patients[0]
        per_model = {label: preds.scores[0] for label, preds in sets.items()}
        example = example_report(patient, per_model, cohort.vocab, EXAMPLE_REPORT_THRESHOLD)

    os.makedirs(args.out_dir, exist_ok=True)
    _atomic_write(os.path.join(args.out_dir, "pr_curve.csv"), lambda p: write_pr_csv(reports, p))
    _atomic_write(os.path.join(args.out_dir, "auroc.csv"), lambda p: write_auroc_csv(reports, p))
    _atomic_write(os.path.join(args.out_dir, "policy.csv"), lambda p: write_policy_csv(reports, p))
    _atomic_write(
        os.path.join(args.out_dir, "reports.json"),
        lambda p: write_reports_json(reports, p, example),
    )
    for report in reports:
        lo, hi = report.auroc_ci
        print(f"{report.label}: AUROC {report.auroc:.4f} [{lo:.4f}, {hi:.4f}]")
    print(f"wrote pr_curve.csv, auroc.csv, policy.csv, reports.json to {args.out_dir}")
    return 0


def cmd_recommend(args: argparse.Namespace) -> int:
    _merge_config(args, ["bundle", "patients", "vocab", "out"])
    _require(args, ["bundle", "patients", "vocab"])
    if args.top_k is not None and int(args.top_k) < 1:
        raise UsageError(f"--top-k must be >= 1, got {args.top_k}")
    vocab = load_vocab(args.vocab)
    bundle = load_bundle(args.bundle)
    bundle.require_vocab(vocab)
    if bundle.diagnostic is None or bundle.autoencoder is None or bundle.ensemble is None:
        raise UsageError("recommendation needs a bundle with diagnostic, autoencoder, and ensemble")
    cohort = load_cohort(args.patients, vocab)
    if not cohort.patients:
        raise UsageError(f"no patients in {args.patients}")
    scores = predict_batch(bundle.diagnostic, bundle.autoencoder, bundle.ensemble, cohort.patients)

    if args.top_k is not None:
        k = int(args.top_k)
        if k > vocab.num_procedures:
            raise UsageError(f"--top-k {k} exceeds {vocab.num_procedures} procedures")
        mask = top_k_mask(scores, k)
        policy = {"policy": "top_k", "k": k}
    else:
        threshold = float(args.threshold)
        if not 0.0 <= threshold <= 1.0:
            raise UsageError(f"--threshold must be in [0, 1], got {threshold}")
        mask = scores >= threshold
        policy = {"policy": "threshold", "threshold": threshold}

    results = []
    for i, patient in enumerate(cohort.patients):
        chosen = np.flatnonzero(mask[i])
        chosen = chosen[np.argsort(-scores[i, chosen], kind="stable")]
        results.append(
            {
                "patient_id": patient.patient_id,
                "policy": policy,
                "recommendations": [
                    {"procedure_id": vocab.procedure_ids[j], "score": float(scores[i, j])}
                    for j in chosen
                ],
            }
        )
    payload = json.dumps({"format_version": 1, "patients": results}, indent=2)
    if args.out:
        _atomic_write(args.out, lambda p: open(p, "w", encoding="utf-8").write(payload + "\n"))
        print(f"wrote recommendations for {len(results)} patients to {args.out}")
    else:
        print(payload)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="workuprec",
        description="Specialty referral workup recommender pipeline",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"workuprec {__version__}"
            f" (cohort format {COHORT_FORMAT_VERSION},"
            f" model format {MODEL_FORMAT_VERSION},"
            f" bundle format {BUNDLE_FORMAT_VERSION})"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic cohort")
    gen.add_argument("--config", help="JSON config file merged under the flags")
    gen.add_argument("--patients", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--signal", type=float, default=1.0)
    gen.add_argument("--specialists", type=int, default=10)
    gen.add_argument("--cohort", help="output cohort JSONL path")
    gen.add_argument("--vocab", help="output vocabulary JSON path")
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train models on a cohort")
    train.add_argument("--config")
    train.add_argument("--cohort")
    train.add_argument("--vocab")
    train.add_argument("--seed", type=int)
    train.add_argument("--lr", type=float, default=0.001)
    train.add_argument("--epochs", type=int, default=400)
    train.add_argument("--batch-size", type=int, default=256, dest="batch_size")
    train.add_argument("--dropout", type=float, default=0.3)
    train.add_argument("--train-fraction", type=float, default=0.8, dest="train_fraction")
    train.add_argument("--models", default=",".join(MODEL_CHOICES))
    train.add_argument("--two-fold-stacking", action="store_true", dest="two_fold_stacking")
    train.add_argument("--rank", type=int, default=20)
    train.add_argument("--pmf-lambda", type=float, default=0.05, dest="pmf_lambda")
    train.add_argument("--pmf-lr", type=float, default=0.005, dest="pmf_lr")
    train.add_argument("--pmf-epochs", type=int, default=200, dest="pmf_epochs")
    train.add_argument("--bundle", help="output bundle JSON path")
    train.add_argument("--loss-csv", dest="loss_csv", help="optional loss history CSV path")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a bundle and/or checklist on the test split")
    ev.add_argument("--config")
    ev.add_argument("--cohort")
    ev.add_argument("--vocab")
    ev.add_argument("--bundle")
    ev.add_argument("--checklist")
    ev.add_argument("--out-dir", dest="out_dir")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--bootstrap-resamples", type=int, default=1000, dest="bootstrap_resamples")
    ev.add_argument("--train-fraction", type=float, default=0.8, dest="train_fraction",
                    help="split fraction when no bundle provides one")
    ev.add_argument("--split-seed", type=int, dest="split_seed",
                    help="split seed when no bundle provides one")
    ev.set_defaults(func=cmd_eval)

    rec = sub.add_parser("recommend", help="emit per-patient recommendations")
    rec.add_argument("--config")
    rec.add_argument("--bundle")
    rec.add_argument("--patients", help="cohort JSONL of patients to score")
    rec.add_argument("--vocab")
    rec.add_argument("--out", help="output JSON path (default: stdout)")
    policy = rec.add_mutually_exclusive_group(required=True)
    policy.add_argument("--threshold", type=float)
    policy.add_argument("--top-k", type=int, dest="top_k")
    rec.set_defaults(func=cmd_recommend)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ShapeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, EvaluationError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
