"""The recommender networks and their stacking composition.

Two base networks are trained separately: one maps labs plus diagnosis codes
to specialty-order scores, the other maps the referring physician's orders to
the same targets. A stacking network then combines their score vectors with
a one-hot of the specialist's hash bucket, which lets it personalize per
specialist. An aggregate network trained on the full concatenated input
serves as the monolithic alternative.

All architectures are fixed; constructors reject nets with any other layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import FactorModel
from .cohort import (
    SPECIALIST_BUCKETS,
    Cohort,
    PatientRecord,
    Vocabularies,
    encode_specialist,
    vocab_sha256,
)
from .errors import FormatError, ShapeError, UsageError
from .nn import Mlp, TrainConfig, init_mlp, train_mlp
from .seeding import stream_seed

BUNDLE_FORMAT_VERSION = 1

DIAGNOSTIC_DIMS = (310, 200, 100, 80, 60)
AUTOENCODER_DIMS = (60, 60, 40, 60, 60)
ENSEMBLE_DIMS = (130, 200, 150, 100, 80, 60)
AGGREGATE_DIMS = (380, 300, 200, 150, 100, 60)


def diagnostic_inputs(patients: list[PatientRecord]) -> np.ndarray:
    """Stack lab features and diagnosis bits; width 310 for the standard vocab."""
    return np.stack(
        [np.concatenate([p.lab_features, p.diagnosis_bits]) for p in patients]
    ).astype(np.float64)


def referral_inputs(patients: list[PatientRecord]) -> np.ndarray:
    return np.stack([p.pcp_procedure_bits for p in patients]).astype(np.float64)


def specialist_onehots(patients: list[PatientRecord]) -> np.ndarray:
    return np.stack(
        [encode_specialist(p.specialist_id, SPECIALIST_BUCKETS) for p in patients]
    ).astype(np.float64)


def aggregate_inputs(patients: list[PatientRecord]) -> np.ndarray:
    return np.stack(
        [
            np.concatenate(
                [
                    p.lab_features,
                    p.diagnosis_bits,
                    p.pcp_procedure_bits,
                    encode_specialist(p.specialist_id, SPECIALIST_BUCKETS),
                ]
            )
            for p in patients
        ]
    ).astype(np.float64)


def label_targets(patients: list[PatientRecord]) -> np.ndarray:
    return np.stack([p.specialty_procedure_bits for p in patients]).astype(np.float64)


def _check_dims(net: Mlp, dims: tuple[int, ...], name: str) -> None:
    if tuple(net.layer_dims) != dims:
        raise ShapeError(f"{name} net has dims {tuple(net.layer_dims)}, expected {dims}")


@dataclass
class DiagnosticModel:
    """Scores specialty orders from lab triples plus diagnosis codes."""

    net: Mlp
    loss_history: list[float] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        _check_dims(self.net, DIAGNOSTIC_DIMS, "diagnostic")

    @classmethod
    def create(cls, dropout_p: float = 0.3, seed: int = 0) -> "DiagnosticModel":
        return cls(init_mlp(list(DIAGNOSTIC_DIMS), dropout_p, seed))

    def scores(self, patients: list[PatientRecord]) -> np.ndarray:
        out, _ = self.net.forward(diagnostic_inputs(patients))
        return out


@dataclass
class AutoencoderModel:
    """Completes specialty orders from the referring physician's orders."""

    net: Mlp
    loss_history: list[float] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        _check_dims(self.net, AUTOENCODER_DIMS, "autoencoder")

    @classmethod
    def create(cls, dropout_p: float = 0.3, seed: int = 0) -> "AutoencoderModel":
        return cls(init_mlp(list(AUTOENCODER_DIMS), dropout_p, seed))

    def scores(self, patients: list[PatientRecord]) -> np.ndarray:
        out, _ = self.net.forward(referral_inputs(patients))
        return out


@dataclass
class EnsembleModel:
    """Stacks the two base score vectors with the specialist one-hot."""

    net: Mlp
    loss_history: list[float] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        _check_dims(self.net, ENSEMBLE_DIMS, "ensemble")

    @classmethod
    def create(cls, dropout_p: float = 0.3, seed: int = 0) -> "EnsembleModel":
        return cls(init_mlp(list(ENSEMBLE_DIMS), dropout_p, seed))

    def scores(self, stacked_inputs: np.ndarray) -> np.ndarray:
        out, _ = self.net.forward(stacked_inputs)
        return out


@dataclass
class AggregateAnnModel:
    """Single network over the full concatenated input."""

    net: Mlp
    loss_history: list[float] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        _check_dims(self.net, AGGREGATE_DIMS, "aggregate")

    @classmethod
    def create(cls, dropout_p: float = 0.3, seed: int = 0) -> "AggregateAnnModel":
        return cls(init_mlp(list(AGGREGATE_DIMS), dropout_p, seed))

    def scores(self, patients: list[PatientRecord]) -> np.ndarray:
        out, _ = self.net.forward(aggregate_inputs(patients))
        return out


def stacked_inputs(
    dm: DiagnosticModel, ae: AutoencoderModel, patients: list[PatientRecord]
) -> np.ndarray:
    """Infer-mode base scores concatenated with the specialist one-hot."""
    x = np.hstack([dm.scores(patients), ae.scores(patients), specialist_onehots(patients)])
    if x.shape[1] != ENSEMBLE_DIMS[0]:
        raise ShapeError(
            f"stacked input width {x.shape[1]} does not match ensemble"
            f" input dim {ENSEMBLE_DIMS[0]}"
        )
    return x


def train_base_models(
    train: Cohort, config: TrainConfig
) -> tuple[DiagnosticModel, AutoencoderModel]:
    """Train the two base networks separately on the training cohort."""
    if not train.patients:
        raise UsageError("training cohort is empty")
    targets = label_targets(train.patients)

    dm_seed = stream_seed(config.seed, "dm")
    dm = DiagnosticModel.create(config.dropout_p, seed=dm_seed)
    _, dm.loss_history = train_mlp(
        dm.net, diagnostic_inputs(train.patients), targets, replace(config, seed=dm_seed)
    )

    ae_seed = stream_seed(config.seed, "ae")
    ae = AutoencoderModel.create(config.dropout_p, seed=ae_seed)
    _, ae.loss_history = train_mlp(
        ae.net, referral_inputs(train.patients), targets, replace(config, seed=ae_seed)
    )
    return dm, ae


def train_ensemble(
    train: Cohort,
    dm: DiagnosticModel,
    ae: AutoencoderModel,
    config: TrainConfig,
    two_fold_stacking: bool = False,
) -> EnsembleModel:
    """Train the stacking network on base-model scores over the training cohort.

    By default the stacking inputs come from the same patients the base models
    were trained on, which leaks their in-sample fit into the stacker. With
    ``two_fold_stacking`` each half's inputs come from temporary base models
    trained on the other half instead; the passed models still serve at
    prediction time.
    """
    if not train.patients:
        raise UsageError("training cohort is empty")
    if two_fold_stacking:
        perm = np.random.default_rng(stream_seed(config.seed, "stack-fold")).permutation(
            len(train.patients)
        )
        halves = [perm[: len(perm) // 2], perm[len(perm) // 2 :]]
        if any(h.size == 0 for h in halves):
            raise UsageError("two-fold stacking needs at least 2 training patients")
        inputs = np.empty((len(train.patients), ENSEMBLE_DIMS[0]))
        for fold, hold_out in enumerate(halves):
            fit_idx = halves[1 - fold]
            fold_cohort = Cohort(train.vocab, [train.patients[i] for i in fit_idx])
            fold_config = replace(config, seed=stream_seed(config.seed, f"stack-{fold}"))
            fold_dm, fold_ae = train_base_models(fold_cohort, fold_config)
            held = [train.patients[i] for i in hold_out]
            inputs[hold_out] = stacked_inputs(fold_dm, fold_ae, held)
    else:
        inputs = stacked_inputs(dm, ae, train.patients)
    targets = label_targets(train.patients)
    ens_seed = stream_seed(config.seed, "ensemble")
    ens = EnsembleModel.create(config.dropout_p, seed=ens_seed)
    _, ens.loss_history = train_mlp(ens.net, inputs, targets, replace(config, seed=ens_seed))
    return ens


def train_aggregate(train: Cohort, config: TrainConfig) -> AggregateAnnModel:
    if not train.patients:
        raise UsageError("training cohort is empty")
    ann_seed = stream_seed(config.seed, "ann")
    ann = AggregateAnnModel.create(config.dropout_p, seed=ann_seed)
    _, ann.loss_history = train_mlp(
        ann.net, aggregate_inputs(train.patients), label_targets(train.patients),
        replace(config, seed=ann_seed),
    )
    return ann


def predict_batch(
    dm: DiagnosticModel,
    ae: AutoencoderModel,
    ens: EnsembleModel,
    patients: list[PatientRecord],
) -> np.ndarray:
    """Full pipeline scores for a patient list. Pure per patient."""
    if not patients:
        raise UsageError("no patients to score")
    return ens.scores(stacked_inputs(dm, ae, patients))


def predict(
    dm: DiagnosticModel,
    ae: AutoencoderModel,
    ens: EnsembleModel,
    patient: PatientRecord,
) -> np.ndarray:
    """Pipeline scores for one patient: 60 values in [0, 1]."""
    return predict_batch(dm, ae, ens, [patient])[0]


@dataclass
class ModelBundle:
    """Everything a deployment needs: nets, factor baselines, and provenance.

    ``vocab_hash`` pins the vocabulary the models were fitted against;
    loading code must refuse cohorts whose vocabulary hashes differently.
    The split parameters allow an evaluator to reconstruct the exact
    train/test partition used at fit time.
    """

    vocab_hash: str
    train_config: TrainConfig
    split_fraction: float
    split_seed: int
    diagnostic: DiagnosticModel | None = None
    autoencoder: AutoencoderModel | None = None
    ensemble: EnsembleModel | None = None
    aggregate: AggregateAnnModel | None = None
    svd: FactorModel | None = None
    pmf: FactorModel | None = None

    def require_vocab(self, vocab: Vocabularies) -> None:
        actual = vocab_sha256(vocab)
        if actual != self.vocab_hash:
            raise UsageError(
                "bundle was fitted against a different vocabulary"
                f" (bundle hash {self.vocab_hash[:12]}..., cohort hash {actual[:12]}...)"
            )

    def to_dict(self) -> dict:
        def factor_dict(model: FactorModel | None) -> dict | None:
            if model is None:
                return None
            return {
                "item_factors": model.item_factors.tolist(),
                "user_factors": model.user_factors.tolist(),
                "rank": model.rank,
                "global_mean": model.global_mean,
                "reg_lambda": model.reg_lambda,
            }

        return {
            "format_version": BUNDLE_FORMAT_VERSION,
            "vocab_hash": self.vocab_hash,
            "train_config": {
                "learning_rate": self.train_config.learning_rate,
                "epochs": self.train_config.epochs,
                "batch_size": self.train_config.batch_size,
                "dropout_p": self.train_config.dropout_p,
                "seed": self.train_config.seed,
            },
            "split_fraction": self.split_fraction,
            "split_seed": self.split_seed,
            "diagnostic": None if self.diagnostic is None else self.diagnostic.net.to_dict(),
            "autoencoder": None if self.autoencoder is None else self.autoencoder.net.to_dict(),
            "ensemble": None if self.ensemble is None else self.ensemble.net.to_dict(),
            "aggregate": None if self.aggregate is None else self.aggregate.net.to_dict(),
            "svd": factor_dict(self.svd),
            "pmf": factor_dict(self.pmf),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelBundle":
        version = data.get("format_version")
        if version != BUNDLE_FORMAT_VERSION:
            raise FormatError(
                f"unsupported bundle format_version {version!r},"
                f" expected {BUNDLE_FORMAT_VERSION}"
            )
        for key in ("vocab_hash", "train_config", "split_fraction", "split_seed"):
            if key not in data:
                raise FormatError(f"bundle is missing field {key!r}")

        def factor_from(entry: dict | None) -> FactorModel | None:
            if entry is None:
                return None
            try:
                return FactorModel(
                    item_factors=np.array(entry["item_factors"]),
                    user_factors=np.array(entry["user_factors"]),
                    rank=int(entry["rank"]),
                    global_mean=float(entry["global_mean"]),
                    reg_lambda=float(entry["reg_lambda"]),
                )
            except KeyError as exc:
                raise FormatError(f"factor model is missing field {exc}") from exc

        tc = data["train_config"]
        try:
            config = TrainConfig(
                learning_rate=float(tc["learning_rate"]),
                epochs=int(tc["epochs"]),
                batch_size=int(tc["batch_size"]),
                dropout_p=float(tc["dropout_p"]),
                seed=int(tc["seed"]),
            )
        except KeyError as exc:
            raise FormatError(f"train_config is missing field {exc}") from exc
        return cls(
            vocab_hash=data["vocab_hash"],
            train_config=config,
            split_fraction=float(data["split_fraction"]),
            split_seed=int(data["split_seed"]),
            diagnostic=(
                None
                if data.get("diagnostic") is None
                else DiagnosticModel(Mlp.from_dict(data["diagnostic"]))
            ),
            autoencoder=(
                None
                if data.get("autoencoder") is None
                else AutoencoderModel(Mlp.from_dict(data["autoencoder"]))
            ),
            ensemble=(
                None
                if data.get("ensemble") is None
                else EnsembleModel(Mlp.from_dict(data["ensemble"]))
            ),
            aggregate=(
                None
                if data.get("aggregate") is None
                else AggregateAnnModel(Mlp.from_dict(data["aggregate"]))
            ),
            svd=factor_from(data.get("svd")),
            pmf=factor_from(data.get("pmf")),
        )


def save_bundle(bundle: ModelBundle, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bundle.to_dict(), fh)
        fh.write("\n")


def load_bundle(path: str) -> ModelBundle:
    with open(path, "r", encoding="utf-8") as fh:
        return ModelBundle.from_dict(json.load(fh))
