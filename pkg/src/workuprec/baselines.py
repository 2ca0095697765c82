"""Matrix-factorization and checklist baselines.

Both factorization baselines operate on the per-patient interaction matrix
whose 120 columns stack the 60 referral-order slots ahead of the 60
specialty-order slots. Prediction folds a new patient in from their observed
referral orders (the slots set to 1) and reads scores off the specialty-slot
factors. The truncated SVD is computed by power iteration with projection
deflation rather than a library routine, which keeps the dense
eigendecomposition available as an independent test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, Vocabularies
from .errors import FormatError, ShapeError, TrainingError, UsageError
from .seeding import stream_rng


def interaction_matrix(cohort: Cohort) -> np.ndarray:
    """(n_patients, 2 * num_procedures) matrix [referral bits | specialty bits]."""
    if not cohort.patients:
        raise UsageError("cohort has no patients")
    return np.hstack(
        [
            np.stack([p.pcp_procedure_bits for p in cohort.patients]).astype(np.float64),
            np.stack([p.specialty_procedure_bits for p in cohort.patients]).astype(np.float64),
        ]
    )


@dataclass
class FactorModel:
    """Low-rank factors of the interaction matrix.

    ``item_factors`` has one row per matrix column (referral slots first),
    ``user_factors`` one row per training patient. For the SVD variant the
    item factors are orthonormal right-singular vectors and the user factors
    carry the singular-value magnitudes.
    """

    item_factors: np.ndarray
    user_factors: np.ndarray
    rank: int
    global_mean: float
    reg_lambda: float = 0.0
    objective_history: list[float] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.item_factors = np.asarray(self.item_factors, dtype=np.float64)
        self.user_factors = np.asarray(self.user_factors, dtype=np.float64)
        if self.item_factors.ndim != 2 or self.user_factors.ndim != 2:
            raise ShapeError("factor matrices must be 2-D")
        n_users = self.user_factors.shape[0]
        n_items = self.item_factors.shape[0]
        if self.rank > min(n_items, n_users):
            raise UsageError(
                f"rank {self.rank} exceeds min(n_items={n_items}, n_users={n_users})"
            )
        if self.item_factors.shape[1] != self.rank or self.user_factors.shape[1] != self.rank:
            raise ShapeError(
                f"factor widths {self.item_factors.shape[1]}/{self.user_factors.shape[1]}"
                f" do not match rank {self.rank}"
            )
        if not (
            np.isfinite(self.item_factors).all() and np.isfinite(self.user_factors).all()
        ):
            raise TrainingError("factor matrices must be finite")


def truncated_svd(
    matrix: np.ndarray,
    rank: int,
    tol: float = 1e-10,
    max_iter: int = 1000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-``rank`` singular values and right-singular vectors of ``matrix``.

    Power iteration on the column Gram matrix, one direction at a time, with
    projection deflation: after direction v converges, the Gram matrix is
    projected onto v's orthogonal complement, which removes exactly the
    component A v v^T regardless of how accurate v's eigenvalue estimate is.
    Iteration stops when the singular-value estimate changes by a relative
    tol or after max_iter rounds. Deterministic via seeded start vectors.

    Returns:
        (values, vectors): values is (rank,) descending, vectors is
        (n_cols, rank) with orthonormal columns. Trailing null directions get
        value 0 and an arbitrary orthonormal completion.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {a.shape}")
    max_rank = min(a.shape)
    if not 1 <= rank <= max_rank:
        raise UsageError(f"rank must be in 1..{max_rank}, got {rank}")
    n_cols = a.shape[1]
    gram = a.T @ a
    rng = stream_rng(seed, "svd-start")
    values = np.zeros(rank)
    vectors = np.zeros((n_cols, rank))
    basis: list[np.ndarray] = []

    def _orthonormalize(vec: np.ndarray) -> np.ndarray | None:
        for u in basis:
            vec = vec - (u @ vec) * u
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            return None
        return vec / norm

    for k in range(rank):
        v = None
        for _ in range(50):  # fresh start vectors until one survives projection
            v = _orthonormalize(rng.standard_normal(n_cols))
            if v is not None:
                break
        if v is None:
            raise TrainingError("could not find a start vector outside the found subspace")
        sigma_prev = np.inf
        sigma = 0.0
        for _ in range(max_iter):
            w = gram @ v
            eigval = float(v @ w)
            sigma = float(np.sqrt(max(eigval, 0.0)))
            w = _orthonormalize(w)
            if w is None or sigma == 0.0:
                sigma = 0.0
                break
            v = w
            if abs(sigma - sigma_prev) <= tol * max(sigma, 1e-300):
                break
            sigma_prev = sigma
        if sigma > 0.0:
            eigval = float(v @ (gram @ v))
            sigma = float(np.sqrt(max(eigval, 0.0)))
        values[k] = sigma
        vectors[:, k] = v
        basis.append(v)
        gv = gram @ v
        vgv = float(v @ gv)
        gram -= np.outer(v, gv) + np.outer(gv, v) - vgv * np.outer(v, v)
    order = np.argsort(-values, kind="stable")
    return values[order], vectors[:, order]


def svd_fit(cohort: Cohort, rank: int, seed: int = 0) -> FactorModel:
    """Center the interaction matrix by its global mean and factor it."""
    matrix = interaction_matrix(cohort)
    max_rank = min(matrix.shape)
    if not 1 <= rank <= max_rank:
        raise UsageError(f"rank must be in 1..{max_rank}, got {rank}")
    mean = float(matrix.mean())
    centered = matrix - mean
    _, vectors = truncated_svd(centered, rank, seed=seed)
    return FactorModel(
        item_factors=vectors,
        user_factors=centered @ vectors,
        rank=rank,
        global_mean=mean,
    )


def _fold_in_scores(
    model: FactorModel,
    pcp_bits: np.ndarray,
    observed_value: float,
    reg_lambda: float,
) -> np.ndarray:
    bits = np.asarray(pcp_bits)
    half = model.item_factors.shape[0] // 2
    if bits.shape != (half,):
        raise ShapeError(f"referral bits width {bits.shape} does not match {half} slots")
    observed = np.flatnonzero(bits == 1)
    if observed.size == 0:
        user = np.zeros(model.rank)
    else:
        design = model.item_factors[observed]
        target = np.full(observed.size, observed_value)
        if reg_lambda > 0.0:
            gram = design.T @ design + reg_lambda * np.eye(model.rank)
            user = np.linalg.solve(gram, design.T @ target)
        else:
            user, *_ = np.linalg.lstsq(design, target, rcond=None)
    raw = model.global_mean + user @ model.item_factors[half:].T
    return np.clip(raw, 0.0, 1.0)


def svd_predict(model: FactorModel, pcp_bits: np.ndarray) -> np.ndarray:
    """Fold a patient in from their referral orders; scores in [0, 1].

    The fold-in solves least squares against the referral-slot factors using
    the observed (ordered) slots only, so an empty referral vector degenerates
    to uniform global-mean scores.
    """
    return _fold_in_scores(model, pcp_bits, 1.0 - model.global_mean, 0.0)


def pmf_factorize(
    matrix: np.ndarray,
    rank: int,
    reg_lambda: float = 0.05,
    lr: float = 0.005,
    epochs: int = 200,
    seed: int = 0,
    batch_size: int = 4096,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """SGD factorization of a fully observed matrix with L2 regularization.

    Minimizes sum((r - u.v)^2) + reg * (||U||^2 + ||V||^2) by shuffled
    mini-batch passes over the entries. The full objective is evaluated at
    every epoch boundary; an epoch that would increase it is rolled back and
    the step size halved, so the logged objective is non-increasing by
    construction. Deterministic per seed.

    Returns (user_factors, item_factors, objective_history).
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {m.shape}")
    if rank < 1 or rank > min(m.shape):
        raise UsageError(f"rank must be in 1..{min(m.shape)}, got {rank}")
    if reg_lambda < 0:
        raise UsageError(f"reg_lambda must be >= 0, got {reg_lambda}")
    if lr <= 0:
        raise UsageError(f"lr must be > 0, got {lr}")
    if epochs < 1:
        raise UsageError(f"epochs must be >= 1, got {epochs}")
    n_rows, n_cols = m.shape
    rng = stream_rng(seed, "pmf")
    users = rng.normal(0.0, 0.1, size=(n_rows, rank))
    items = rng.normal(0.0, 0.1, size=(n_cols, rank))
    rows = np.repeat(np.arange(n_rows), n_cols)
    cols = np.tile(np.arange(n_cols), n_rows)
    vals = m.ravel()
    total = vals.size

    def objective(u: np.ndarray, v: np.ndarray) -> float:
        resid = m - u @ v.T
        return float((resid * resid).sum() + reg_lambda * ((u * u).sum() + (v * v).sum()))

    best = objective(users, items)
    snap_users, snap_items = users.copy(), items.copy()
    step = lr
    history: list[float] = []
    for _ in range(epochs):
        perm = rng.permutation(total)
        for start in range(0, total, batch_size):
            idx = perm[start : start + batch_size]
            i, j = rows[idx], cols[idx]
            err = vals[idx] - np.einsum("br,br->b", users[i], items[j])
            # decoupled L2 step, scaled by the batch's share of the objective
            decay = max(1.0 - 2.0 * step * reg_lambda * (idx.size / total), 0.0)
            grad_u = 2.0 * step * err[:, None] * items[j]
            grad_v = 2.0 * step * err[:, None] * users[i]
            if decay != 1.0:
                users *= decay
                items *= decay
            np.add.at(users, i, grad_u)
            np.add.at(items, j, grad_v)
        if not (np.isfinite(users).all() and np.isfinite(items).all()):
            raise TrainingError("matrix factors diverged; use a smaller learning rate")
        current = objective(users, items)
        if not np.isfinite(current):
            raise TrainingError("objective diverged; use a smaller learning rate")
        if current > best:
            users[:] = snap_users
            items[:] = snap_items
            step *= 0.5
            current = best
        else:
            snap_users[:] = users
            snap_items[:] = items
            best = current
        history.append(current)
    return users, items, history


def pmf_fit(
    cohort: Cohort,
    rank: int = 20,
    reg_lambda: float = 0.05,
    lr: float = 0.005,
    epochs: int = 200,
    seed: int = 0,
) -> FactorModel:
    """Probabilistic-matrix-factorization baseline on the raw 0/1 matrix.

    Every slot of a training patient counts as observed (the bits are
    explicit). The fitted model keeps the regularization weight so fold-in
    uses the same penalty.
    """
    matrix = interaction_matrix(cohort)
    users, items, history = pmf_factorize(
        matrix, rank=rank, reg_lambda=reg_lambda, lr=lr, epochs=epochs, seed=seed
    )
    return FactorModel(
        item_factors=items,
        user_factors=users,
        rank=rank,
        global_mean=float(matrix.mean()),
        reg_lambda=reg_lambda,
        objective_history=history,
    )


def pmf_predict(model: FactorModel, pcp_bits: np.ndarray) -> np.ndarray:
    """Regularized fold-in from the observed referral orders.

    With an empty referral vector the penalty drives the folded-in factor to
    zero and the scores collapse to the clamped global mean.
    """
    return _fold_in_scores(model, pcp_bits, 1.0, model.reg_lambda)


@dataclass
class Checklist:
    """Static diagnosis -> recommended-procedures mapping."""

    mapping: dict[str, list[str]]
    vocab: Vocabularies

    def __post_init__(self) -> None:
        known_dx = set(self.vocab.diagnosis_ids)
        known_proc = {pid: i for i, pid in enumerate(self.vocab.procedure_ids)}
        self._sets: list[np.ndarray] = []
        for dx_id in self.mapping:
            if dx_id not in known_dx:
                raise FormatError(f"checklist references unknown diagnosis id {dx_id!r}")
        for dx_id in self.vocab.diagnosis_ids:
            procs = self.mapping.get(dx_id, [])
            unknown = [p for p in procs if p not in known_proc]
            if unknown:
                raise FormatError(
                    f"checklist for {dx_id!r} references unknown procedure ids {unknown}"
                )
            self._sets.append(np.array(sorted(known_proc[p] for p in set(procs)), dtype=int))


def checklist_predict(diagnosis_bits: np.ndarray, checklist: Checklist) -> np.ndarray:
    """Score 1.0 for the union of the active diagnoses' checklist sets."""
    bits = np.asarray(diagnosis_bits)
    if bits.shape != (checklist.vocab.num_diagnoses,):
        raise ShapeError(
            f"diagnosis bits width {bits.shape} does not match"
            f" vocabulary size {checklist.vocab.num_diagnoses}"
        )
    scores = np.zeros(checklist.vocab.num_procedures)
    for d in np.flatnonzero(bits == 1):
        scores[checklist._sets[d]] = 1.0
    return scores


def load_checklist(path: str, vocab: Vocabularies) -> Checklist:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise FormatError("checklist file must be a JSON object of diagnosis -> procedures")
    mapping = {}
    for dx_id, procs in data.items():
        if not isinstance(procs, list):
            raise FormatError(f"checklist entry {dx_id!r} must map to a list of procedure ids")
        mapping[str(dx_id)] = [str(p) for p in procs]
    return Checklist(mapping=mapping, vocab=vocab)


def save_checklist(checklist: Checklist, path: str) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checklist.mapping, fh, indent=2, sort_keys=True)
        fh.write("\n")
