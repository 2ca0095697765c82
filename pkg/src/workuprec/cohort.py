"""Domain types and deterministic feature encoders for referral cohorts.

A patient is encoded as four bit vectors: lab results as (present, low, high)
triples against per-lab normal ranges, active diagnosis codes, procedures the
referring physician already ordered, and the specialist-ordered procedures
that serve as prediction labels. All encoders are pure functions and safe for
unrestricted parallel use.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import FormatError, ShapeError, UsageError
from .seeding import stream_rng

COHORT_FORMAT_VERSION = 1
SPECIALIST_BUCKETS = 10


@dataclass
class Vocabularies:
    """Ordered id lists plus per-lab normal ranges; fixes all vector widths."""

    lab_ids: list[str]
    procedure_ids: list[str]
    diagnosis_ids: list[str]
    lab_normal_ranges: dict[str, tuple[float, float]]

    def __post_init__(self) -> None:
        for name, ids in (
            ("lab_ids", self.lab_ids),
            ("procedure_ids", self.procedure_ids),
            ("diagnosis_ids", self.diagnosis_ids),
        ):
            if len(set(ids)) != len(ids):
                raise UsageError(f"{name} contains duplicates")
            if not ids:
                raise UsageError(f"{name} is empty")
        missing = [lab for lab in self.lab_ids if lab not in self.lab_normal_ranges]
        if missing:
            raise UsageError(f"labs without a normal range: {missing[:5]}")
        for lab, (low, high) in self.lab_normal_ranges.items():
            if not low < high:
                raise UsageError(f"lab {lab} normal range [{low}, {high}] needs low < high")

    @property
    def num_labs(self) -> int:
        return len(self.lab_ids)

    @property
    def num_procedures(self) -> int:
        return len(self.procedure_ids)

    @property
    def num_diagnoses(self) -> int:
        return len(self.diagnosis_ids)

    @property
    def lab_feature_width(self) -> int:
        return 3 * self.num_labs


@dataclass(frozen=True)
class RawLabResult:
    """One lab measurement; ``value`` is present iff the lab was observed."""

    lab_id: str
    value: float | None
    observed: bool

    def __post_init__(self) -> None:
        if self.observed and self.value is None:
            raise UsageError(f"lab {self.lab_id}: observed result needs a value")
        if not self.observed and self.value is not None:
            raise UsageError(f"lab {self.lab_id}: unobserved result cannot carry a value")


def encode_lab(result: RawLabResult, normal_range: tuple[float, float]) -> tuple[int, int, int]:
    """Encode one lab as (present, low, high) bits.

    Missing labs encode as (0, 0, 0). Values at or inside the normal range are
    normal (closed interval), below it low, above it high.
    """
    low_bound, high_bound = normal_range
    if not low_bound < high_bound:
        raise UsageError(f"normal range [{low_bound}, {high_bound}] needs low < high")
    if not result.observed:
        return (0, 0, 0)
    if result.value < low_bound:
        return (1, 1, 0)
    if result.value > high_bound:
        return (1, 0, 1)
    return (1, 0, 0)


def encode_lab_panel(results: Iterable[RawLabResult], vocab: Vocabularies) -> np.ndarray:
    """Encode a set of lab results into the (3 * num_labs) feature vector.

    Labs absent from ``results`` encode as missing. Lab ids must be in the
    vocabulary and appear at most once.
    """
    by_id: dict[str, RawLabResult] = {}
    for result in results:
        if result.lab_id not in vocab.lab_normal_ranges:
            raise UsageError(f"unknown lab id {result.lab_id!r}")
        if result.lab_id in by_id:
            raise UsageError(f"duplicate lab result for {result.lab_id!r}")
        by_id[result.lab_id] = result
    features = np.zeros(vocab.lab_feature_width, dtype=np.int8)
    for i, lab_id in enumerate(vocab.lab_ids):
        result = by_id.get(lab_id)
        if result is None:
            continue
        features[3 * i : 3 * i + 3] = encode_lab(result, vocab.lab_normal_ranges[lab_id])
    return features


def specialist_bucket(specialist_id: str, num_buckets: int = SPECIALIST_BUCKETS) -> int:
    """Stable hash of an arbitrary specialist identifier into a bucket."""
    if num_buckets < 1:
        raise UsageError(f"num_buckets must be >= 1, got {num_buckets}")
    digest = hashlib.sha256(str(specialist_id).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % num_buckets


def encode_specialist(specialist_id: str, num_buckets: int = SPECIALIST_BUCKETS) -> np.ndarray:
    """One-hot encoding of the specialist's hash bucket."""
    onehot = np.zeros(num_buckets, dtype=np.int8)
    onehot[specialist_bucket(specialist_id, num_buckets)] = 1
    return onehot


def _as_bits(name: str, values, width: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int8)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if width is not None and arr.shape[0] != width:
        raise ShapeError(f"{name} has width {arr.shape[0]}, expected {width}")
    if not np.isin(arr, (0, 1)).all():
        raise UsageError(f"{name} must contain only 0/1 entries")
    return arr


@dataclass
class PatientRecord:
    """One encoded patient; label bits are the specialist-ordered procedures."""

    patient_id: str
    lab_features: np.ndarray
    diagnosis_bits: np.ndarray
    pcp_procedure_bits: np.ndarray
    specialist_id: str
    specialty_procedure_bits: np.ndarray

    def __post_init__(self) -> None:
        self.lab_features = _as_bits("lab_features", self.lab_features)
        if self.lab_features.shape[0] % 3 != 0:
            raise ShapeError(
                f"lab_features width {self.lab_features.shape[0]} is not a multiple of 3"
            )
        self.diagnosis_bits = _as_bits("diagnosis_bits", self.diagnosis_bits)
        self.pcp_procedure_bits = _as_bits("pcp_procedure_bits", self.pcp_procedure_bits)
        self.specialty_procedure_bits = _as_bits(
            "specialty_procedure_bits", self.specialty_procedure_bits
        )
        if self.pcp_procedure_bits.shape != self.specialty_procedure_bits.shape:
            raise ShapeError(
                f"pcp width {self.pcp_procedure_bits.shape[0]} does not match"
                f" specialty width {self.specialty_procedure_bits.shape[0]}"
            )
        triples = self.lab_triples()
        flagged = (triples[:, 1] == 1) | (triples[:, 2] == 1)
        if ((flagged & (triples[:, 0] == 0))).any():
            bad = int(np.flatnonzero(flagged & (triples[:, 0] == 0))[0])
            raise UsageError(f"lab triple {bad}: low/high flag set on a missing lab")
        if ((triples[:, 1] == 1) & (triples[:, 2] == 1)).any():
            bad = int(np.flatnonzero((triples[:, 1] == 1) & (triples[:, 2] == 1))[0])
            raise UsageError(f"lab triple {bad}: low and high flags are mutually exclusive")

    def lab_triples(self) -> np.ndarray:
        """Lab features viewed as an (num_labs, 3) array of (present, low, high)."""
        return self.lab_features.reshape(-1, 3)


@dataclass
class Cohort:
    vocab: Vocabularies
    patients: list[PatientRecord]

    def __post_init__(self) -> None:
        for patient in self.patients:
            if patient.lab_features.shape[0] != self.vocab.lab_feature_width:
                raise ShapeError(
                    f"patient {patient.patient_id}: lab width"
                    f" {patient.lab_features.shape[0]} != {self.vocab.lab_feature_width}"
                )
            if patient.diagnosis_bits.shape[0] != self.vocab.num_diagnoses:
                raise ShapeError(
                    f"patient {patient.patient_id}: diagnosis width"
                    f" {patient.diagnosis_bits.shape[0]} != {self.vocab.num_diagnoses}"
                )
            if patient.pcp_procedure_bits.shape[0] != self.vocab.num_procedures:
                raise ShapeError(
                    f"patient {patient.patient_id}: procedure width"
                    f" {patient.pcp_procedure_bits.shape[0]} != {self.vocab.num_procedures}"
                )

    def __len__(self) -> int:
        return len(self.patients)


def split_cohort(
    cohort: Cohort, train_fraction: float = 0.8, seed: int = 0
) -> tuple[Cohort, Cohort]:
    """Seeded uniform shuffle, then prefix split with ceil rounding on train.

    The partitions are disjoint and exhaustive and identical for identical
    seeds. Raises if either side would be empty.
    """
    if not 0.0 < train_fraction < 1.0:
        raise UsageError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(cohort)
    if n < 2:
        raise UsageError(f"need at least 2 patients to split, got {n}")
    n_train = math.ceil(train_fraction * n)
    if n_train < 1 or n_train >= n:
        raise UsageError(
            f"split of {n} patients at fraction {train_fraction} leaves an empty side"
        )
    perm = stream_rng(seed, "split").permutation(n)
    train = [cohort.patients[i] for i in perm[:n_train]]
    test = [cohort.patients[i] for i in perm[n_train:]]
    return Cohort(cohort.vocab, train), Cohort(cohort.vocab, test)


# ---------------------------------------------------------------------------
# File formats: a JSON header for vocabularies and JSON-lines for patients.
# ---------------------------------------------------------------------------


def vocab_to_dict(vocab: Vocabularies) -> dict:
    return {
        "format_version": COHORT_FORMAT_VERSION,
        "lab_ids": list(vocab.lab_ids),
        "procedure_ids": list(vocab.procedure_ids),
        "diagnosis_ids": list(vocab.diagnosis_ids),
        "lab_normal_ranges": {
            lab: [float(low), float(high)]
            for lab, (low, high) in vocab.lab_normal_ranges.items()
        },
    }


def vocab_from_dict(data: dict) -> Vocabularies:
    version = data.get("format_version")
    if version != COHORT_FORMAT_VERSION:
        raise FormatError(
            f"unsupported cohort format_version {version!r}, expected {COHORT_FORMAT_VERSION}"
        )
    for key in ("lab_ids", "procedure_ids", "diagnosis_ids", "lab_normal_ranges"):
        if key not in data:
            raise FormatError(f"vocabulary file is missing field {key!r}")
    return Vocabularies(
        lab_ids=list(data["lab_ids"]),
        procedure_ids=list(data["procedure_ids"]),
        diagnosis_ids=list(data["diagnosis_ids"]),
        lab_normal_ranges={
            lab: (float(low), float(high))
            for lab, (low, high) in data["lab_normal_ranges"].items()
        },
    )


def vocab_sha256(vocab: Vocabularies) -> str:
    """Canonical hash used to pair model bundles with the cohort they fit."""
    canonical = json.dumps(vocab_to_dict(vocab), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_vocab(vocab: Vocabularies, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vocab_to_dict(vocab), fh, indent=2)
        fh.write("\n")


def load_vocab(path: str) -> Vocabularies:
    with open(path, "r", encoding="utf-8") as fh:
        return vocab_from_dict(json.load(fh))


def patient_to_dict(patient: PatientRecord) -> dict:
    return {
        "patient_id": patient.patient_id,
        "lab_features": patient.lab_features.tolist(),
        "diagnosis_bits": patient.diagnosis_bits.tolist(),
        "pcp_procedure_bits": patient.pcp_procedure_bits.tolist(),
        "specialist_id": patient.specialist_id,
        "specialty_procedure_bits": patient.specialty_procedure_bits.tolist(),
    }


def patient_from_dict(data: dict) -> PatientRecord:
    try:
        return PatientRecord(
            patient_id=data["patient_id"],
            lab_features=data["lab_features"],
            diagnosis_bits=data["diagnosis_bits"],
            pcp_procedure_bits=data["pcp_procedure_bits"],
            specialist_id=data["specialist_id"],
            specialty_procedure_bits=data["specialty_procedure_bits"],
        )
    except KeyError as exc:
        raise FormatError(f"patient record is missing field {exc}") from exc


def save_cohort(cohort: Cohort, path: str) -> None:
    """One patient per line; pair the file with its vocabulary header."""
    with open(path, "w", encoding="utf-8") as fh:
        for patient in cohort.patients:
            fh.write(json.dumps(patient_to_dict(patient), separators=(",", ":")))
            fh.write("\n")


def load_cohort(path: str, vocab: Vocabularies) -> Cohort:
    patients = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{line_no}: invalid JSON") from exc
            patients.append(patient_from_dict(record))
    return Cohort(vocab, patients)
