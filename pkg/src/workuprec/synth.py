"""Seeded synthetic cohort generator with a closed-form scoring oracle.

Patients are drawn from a known generative process: diagnoses condition lab
abnormalities and specialist orders, specialists have individual ordering
preferences, and the referring physician's orders echo a fraction of the
true specialist orders plus diagnosis-conditioned noise. Because the process
is fully parameterized, the exact conditional probability of every order
given a patient's observable features is available as a scoring ceiling that
no trained model should beat.

``signal_strength`` scales every feature-label dependency, including the
echo pathway, so at 0 the labels are independent of all inputs and any
predictor degenerates to chance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .cohort import Cohort, PatientRecord, Vocabularies
from .errors import UsageError
from .nn import sigmoid
from .seeding import stream_rng

if TYPE_CHECKING:
    from .baselines import Checklist


@dataclass(frozen=True)
class GeneratorConfig:
    """Scalar knobs for the generator; parameter tables derive from the seed.

    The per-diagnosis tables (lab abnormality boosts, order logits, referral
    noise) are sampled once from ``seed`` and then fixed, so a config file
    stays small and two configs with equal fields describe equal cohorts.
    """

    num_patients: int
    seed: int = 0
    signal_strength: float = 1.0
    num_specialists: int = 10
    num_labs: int = 100
    num_procedures: int = 60
    num_diagnoses: int = 10
    echo_probability: float = 0.7
    base_order_logit: float = -2.5

    def __post_init__(self) -> None:
        if self.num_patients < 1:
            raise UsageError(f"num_patients must be >= 1, got {self.num_patients}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise UsageError(f"signal_strength must be in [0, 1], got {self.signal_strength}")
        if not 0.0 <= self.echo_probability <= 1.0:
            raise UsageError(f"echo_probability must be in [0, 1], got {self.echo_probability}")
        for name in ("num_specialists", "num_labs", "num_procedures", "num_diagnoses"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")


@dataclass
class GeneratorTables:
    """Seed-derived parameter tables backing both sampling and the oracle."""

    vocab: Vocabularies
    specialist_ids: list[str]
    lab_obs_p: np.ndarray  # (L,) observation probability per lab
    lab_base_abn: np.ndarray  # (L,) abnormality probability with no diagnosis boost
    dx_lab_abn: np.ndarray  # (D, L) noisy-or abnormality boost per diagnosis
    lab_high_given_abn: np.ndarray  # (L,) direction split of abnormal results
    dx_order_logit: np.ndarray  # (D, P) order-logit contribution per diagnosis
    lab_low_logit: np.ndarray  # (L, P) order-logit contribution of a low result
    lab_high_logit: np.ndarray  # (L, P) order-logit contribution of a high result
    specialist_logit: np.ndarray  # (S, P) per-specialist ordering preference
    dx_noise_p: np.ndarray  # (D, P) noisy-or referral-noise probability
    base_noise_p: np.ndarray  # (P,) baseline referral-noise probability

    def specialist_index(self, specialist_id: str) -> int:
        try:
            return self.specialist_ids.index(specialist_id)
        except ValueError:
            raise UsageError(
                f"specialist {specialist_id!r} was not produced by this generator config"
            ) from None


def _sparse_rows(rng, rows, cols, picks, low, high) -> np.ndarray:
    """Row-sparse table: each row gets `picks` random columns with U(low, high)."""
    table = np.zeros((rows, cols))
    picks = min(picks, cols)
    for r in range(rows):
        chosen = rng.choice(cols, size=picks, replace=False)
        table[r, chosen] = rng.uniform(low, high, size=picks)
    return table


def build_tables(config: GeneratorConfig) -> GeneratorTables:
    """Derive all parameter tables from the config seed. Pure and cheap."""
    rng = stream_rng(config.seed, "tables")
    L, P, D, S = (
        config.num_labs,
        config.num_procedures,
        config.num_diagnoses,
        config.num_specialists,
    )
    lab_obs_p = rng.uniform(0.35, 0.9, size=L)
    lab_base_abn = rng.uniform(0.04, 0.12, size=L)
    dx_lab_abn = _sparse_rows(rng, D, L, picks=8, low=0.45, high=0.85)
    lab_high_given_abn = rng.uniform(0.25, 0.75, size=L)
    dx_order_logit = _sparse_rows(rng, D, P, picks=12, low=2.0, high=3.4)
    lab_low_logit = _sparse_rows(rng, L, P, picks=2, low=1.3, high=2.6)
    lab_high_logit = _sparse_rows(rng, L, P, picks=2, low=1.3, high=2.6)
    specialist_logit = rng.normal(0.0, 0.7, size=(S, P))
    dx_noise_p = _sparse_rows(rng, D, P, picks=6, low=0.12, high=0.3)
    base_noise_p = rng.uniform(0.01, 0.05, size=P)

    range_low = np.round(rng.uniform(0.5, 5.0, size=L), 3)
    range_width = np.round(rng.uniform(0.5, 5.0, size=L), 3)
    lab_ids = [f"LAB{i:03d}" for i in range(L)]
    vocab = Vocabularies(
        lab_ids=lab_ids,
        procedure_ids=[f"PROC{i:02d}" for i in range(P)],
        diagnosis_ids=[f"DX{i:02d}" for i in range(D)],
        lab_normal_ranges={
            lab: (float(range_low[i]), float(range_low[i] + range_width[i]))
            for i, lab in enumerate(lab_ids)
        },
    )
    return GeneratorTables(
        vocab=vocab,
        specialist_ids=[f"SPEC{i:02d}" for i in range(S)],
        lab_obs_p=lab_obs_p,
        lab_base_abn=lab_base_abn,
        dx_lab_abn=dx_lab_abn,
        lab_high_given_abn=lab_high_given_abn,
        dx_order_logit=dx_order_logit,
        lab_low_logit=lab_low_logit,
        lab_high_logit=lab_high_logit,
        specialist_logit=specialist_logit,
        dx_noise_p=dx_noise_p,
        base_noise_p=base_noise_p,
    )


def _order_q(
    tables: GeneratorTables,
    config: GeneratorConfig,
    dx_bits: np.ndarray,
    low_bits: np.ndarray,
    high_bits: np.ndarray,
    specialist_idx: int,
) -> np.ndarray:
    """P(order | diagnoses, labs, specialist): the pre-referral conditional."""
    effect = (
        dx_bits.astype(np.float64) @ tables.dx_order_logit
        + low_bits.astype(np.float64) @ tables.lab_low_logit
        + high_bits.astype(np.float64) @ tables.lab_high_logit
        + tables.specialist_logit[specialist_idx]
    )
    return sigmoid(config.base_order_logit + config.signal_strength * effect)


def _noise_p(tables: GeneratorTables, dx_bits: np.ndarray) -> np.ndarray:
    """Noisy-or referral-noise probability per procedure given the diagnoses."""
    keep = 1.0 - tables.base_noise_p
    for d in np.flatnonzero(dx_bits):
        keep = keep * (1.0 - tables.dx_noise_p[d])
    return 1.0 - keep


def generate(config: GeneratorConfig) -> Cohort:
    """Sample a cohort. Fully deterministic per config (a sequential stream).

    Per patient: 1-3 uniform diagnosis codes, lab triples from the
    diagnosis-conditioned abnormality model, a uniform specialist, specialty
    orders from the logit model, and referral orders that echo each true
    specialty order with probability signal_strength * echo_probability plus
    diagnosis-conditioned noise orders.
    """
    tables = build_tables(config)
    rng = stream_rng(config.seed, "generate")
    L, P, D = config.num_labs, config.num_procedures, config.num_diagnoses
    echo = config.signal_strength * config.echo_probability
    patients = []
    for i in range(config.num_patients):
        n_dx = int(rng.integers(1, min(3, D) + 1))
        dx_idx = rng.choice(D, size=n_dx, replace=False)
        dx_bits = np.zeros(D, dtype=np.int8)
        dx_bits[dx_idx] = 1

        observed = rng.random(L) < tables.lab_obs_p
        keep = 1.0 - tables.lab_base_abn
        for d in dx_idx:
            keep = keep * (1.0 - tables.dx_lab_abn[d])
        abnormal = observed & (rng.random(L) < (1.0 - keep))
        high = abnormal & (rng.random(L) < tables.lab_high_given_abn)
        low = abnormal & ~high
        lab_features = np.zeros(3 * L, dtype=np.int8)
        lab_features[0::3] = observed
        lab_features[1::3] = low
        lab_features[2::3] = high

        specialist_idx = int(rng.integers(config.num_specialists))
        q = _order_q(tables, config, dx_bits, low.astype(np.int8), high.astype(np.int8), specialist_idx)
        specialty_bits = (rng.random(P) < q).astype(np.int8)

        noise_p = _noise_p(tables, dx_bits)
        echoed = (specialty_bits == 1) & (rng.random(P) < echo)
        noise = rng.random(P) < noise_p
        pcp_bits = (echoed | noise).astype(np.int8)

        patients.append(
            PatientRecord(
                patient_id=f"PT{i:06d}",
                lab_features=lab_features,
                diagnosis_bits=dx_bits,
                pcp_procedure_bits=pcp_bits,
                specialist_id=tables.specialist_ids[specialist_idx],
                specialty_procedure_bits=specialty_bits,
            )
        )
    return Cohort(tables.vocab, patients)


def _check_record(config: GeneratorConfig, record: PatientRecord) -> None:
    if record.diagnosis_bits.shape[0] != config.num_diagnoses:
        raise UsageError(
            f"patient diagnosis width {record.diagnosis_bits.shape[0]} does not match"
            f" config num_diagnoses {config.num_diagnoses}"
        )
    if record.lab_features.shape[0] != 3 * config.num_labs:
        raise UsageError(
            f"patient lab width {record.lab_features.shape[0]} does not match"
            f" config num_labs {config.num_labs}"
        )
    if record.specialty_procedure_bits.shape[0] != config.num_procedures:
        raise UsageError(
            f"patient procedure width {record.specialty_procedure_bits.shape[0]} does not"
            f" match config num_procedures {config.num_procedures}"
        )


def order_probabilities(config: GeneratorConfig, record: PatientRecord) -> np.ndarray:
    """The exact per-procedure probabilities ``generate`` sampled labels from.

    Conditions on diagnoses, labs, and specialist identity only; the echoed
    referral orders are not part of this conditional.
    """
    _check_record(config, record)
    tables = build_tables(config)
    triples = record.lab_triples()
    return _order_q(
        tables,
        config,
        record.diagnosis_bits,
        triples[:, 1],
        triples[:, 2],
        tables.specialist_index(record.specialist_id),
    )


def bayes_scores(config: GeneratorConfig, record: PatientRecord) -> np.ndarray:
    """Exact conditional order probability given every observable feature.

    Extends ``order_probabilities`` with the evidence carried by the referral
    orders (each is an echo of the true order with known probability, plus
    known noise), which is what makes this a ceiling for models that see the
    referral bits. With signal_strength 0 the echo vanishes and every score
    collapses to sigmoid(base_order_logit).
    """
    _check_record(config, record)
    tables = build_tables(config)
    q = order_probabilities(config, record)
    noise_p = _noise_p(tables, record.diagnosis_bits)
    echo = config.signal_strength * config.echo_probability
    p_ref_given_order = 1.0 - (1.0 - echo) * (1.0 - noise_p)
    p_ref_given_no_order = noise_p

    pos_num = q * p_ref_given_order
    pos_den = pos_num + (1.0 - q) * p_ref_given_no_order
    neg_num = q * (1.0 - p_ref_given_order)
    neg_den = neg_num + (1.0 - q) * (1.0 - p_ref_given_no_order)
    posterior_pos = np.divide(pos_num, pos_den, out=q.copy(), where=pos_den > 0)
    posterior_neg = np.divide(neg_num, neg_den, out=q.copy(), where=neg_den > 0)
    return np.where(record.pcp_procedure_bits == 1, posterior_pos, posterior_neg)


def bayes_scores_batch(config: GeneratorConfig, patients: list[PatientRecord]) -> np.ndarray:
    """Stacked ``bayes_scores`` for a patient list (tables built once)."""
    tables = build_tables(config)
    echo = config.signal_strength * config.echo_probability
    out = np.empty((len(patients), config.num_procedures))
    for i, record in enumerate(patients):
        _check_record(config, record)
        triples = record.lab_triples()
        q = _order_q(
            tables,
            config,
            record.diagnosis_bits,
            triples[:, 1],
            triples[:, 2],
            tables.specialist_index(record.specialist_id),
        )
        noise_p = _noise_p(tables, record.diagnosis_bits)
        p_ref_given_order = 1.0 - (1.0 - echo) * (1.0 - noise_p)
        pos_num = q * p_ref_given_order
        pos_den = pos_num + (1.0 - q) * noise_p
        neg_num = q * (1.0 - p_ref_given_order)
        neg_den = neg_num + (1.0 - q) * (1.0 - noise_p)
        posterior_pos = np.divide(pos_num, pos_den, out=q.copy(), where=pos_den > 0)
        posterior_neg = np.divide(neg_num, neg_den, out=q.copy(), where=neg_den > 0)
        out[i] = np.where(record.pcp_procedure_bits == 1, posterior_pos, posterior_neg)
    return out


def default_checklist(config: GeneratorConfig, per_diagnosis: int = 8) -> "Checklist":
    """Checklist mapping each diagnosis to its most-indicated procedures.

    Derived from the generator's own order-logit table, so it is the
    strongest diagnosis-only rule the generative process supports.
    """
    from .baselines import Checklist

    if per_diagnosis < 1:
        raise UsageError(f"per_diagnosis must be >= 1, got {per_diagnosis}")
    tables = build_tables(config)
    mapping: dict[str, list[str]] = {}
    for d, dx_id in enumerate(tables.vocab.diagnosis_ids):
        logits = tables.dx_order_logit[d]
        candidates = np.flatnonzero(logits > 0)
        ranked = candidates[np.argsort(-logits[candidates], kind="stable")]
        chosen = np.sort(ranked[:per_diagnosis])
        mapping[dx_id] = [tables.vocab.procedure_ids[j] for j in chosen]
    return Checklist(mapping=mapping, vocab=tables.vocab)
