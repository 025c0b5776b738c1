"""Subject-level nested cross-validation, linear predictors and significance testing.

Samples are sequences (one per subject, visit and activity). Predictions are
averaged over activities per subject-visit before scoring, and splits never
separate two visits of the same subject.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .skeleton import Activity

logger = logging.getLogger(__name__)

ALPHA_RANGE = (1e-3, 1e3)
MINORITY_STRATIFY = 0.20


# -- metrics -------------------------------------------------------------------

def pearson(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Pearson r; NaN when either side has no variance."""
    a = np.asarray(y_true, dtype=np.float64)
    b = np.asarray(y_pred, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-D arrays of equal length")
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0 or not math.isfinite(den):
        return float("nan")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(((y - p) ** 2).sum()) / ss_tot


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """ROC AUC as the normalised Mann-Whitney statistic, ties counted half."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(s)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def spearman(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return pearson(stats.rankdata(y_true), stats.rankdata(y_pred))


def metric(y_true: np.ndarray, y_pred: np.ndarray, kind: str) -> float:
    kinds = {"pearson": pearson, "r2": r2_score, "auc": auc, "spearman": spearman}
    if kind not in kinds:
        raise ValueError(f"unknown metric {kind!r}")
    return kinds[kind](y_true, y_pred)


def is_binary(y: np.ndarray) -> bool:
    v = np.asarray(y, dtype=np.float64)
    v = v[np.isfinite(v)]
    return v.size > 0 and bool(np.all((v == 0.0) | (v == 1.0)))


# -- multiple testing ----------------------------------------------------------

def bh_adjust(pvalues: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg adjusted q-values (step-up, capped at 1)."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    q = np.empty(m)
    q[order] = q_sorted
    return q


def bh_fdr(
    pvalues: Mapping[str, Sequence[float]], q_threshold: float = 0.05
) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Adjust each family independently; returns ``{family: (q, reject)}``."""
    out = {}
    for fam, ps in pvalues.items():
        q = bh_adjust(ps)
        out[fam] = (q, q <= q_threshold)
    return out


# -- splits --------------------------------------------------------------------

@dataclass
class SplitPlan:
    """Outer folds per seed; each fold is the sorted array of its test subjects."""

    subjects: np.ndarray
    seeds: List[int]
    assignments: List[List[np.ndarray]]
    outer_folds: int = 5
    inner_folds: int = 4
    stratified: bool = False

    def folds(self, seed_index: int) -> List[Tuple[np.ndarray, np.ndarray]]:
        result = []
        for test in self.assignments[seed_index]:
            train = np.setdiff1d(self.subjects, test)
            result.append((train, test))
        return result

    def check_leakage(self) -> None:
        for s, folds in enumerate(self.assignments):
            seen = np.concatenate(folds)
            if len(seen) != len(self.subjects) or set(seen.tolist()) != set(self.subjects.tolist()):
                raise AssertionError(f"seed {self.seeds[s]}: folds are not a partition of the subjects")
            for train, test in self.folds(s):
                if np.intersect1d(train, test).size:
                    raise AssertionError(f"seed {self.seeds[s]}: subject appears in train and test")


def default_seeds(base_seed: int = 0, n: int = 15) -> List[int]:
    return [int(base_seed) * 1000 + i for i in range(n)]


def _assign_folds(subjects: np.ndarray, labels: Optional[np.ndarray], k: int, rng: np.random.Generator) -> List[np.ndarray]:
    buckets: List[List[str]] = [[] for _ in range(k)]
    if labels is None:
        for i, s in enumerate(subjects[rng.permutation(len(subjects))]):
            buckets[i % k].append(s)
    else:
        offset = 0
        for cls in np.unique(labels):
            members = subjects[labels == cls]
            for i, s in enumerate(members[rng.permutation(len(members))]):
                buckets[(offset + i) % k].append(s)
            offset += len(members)
    return [np.sort(np.array(b, dtype=object)) for b in buckets]


def _subject_labels(subject_ids: Sequence[str], labels: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    per: Dict[str, float] = {}
    for s, y in zip(subject_ids, labels):
        if y is None or not math.isfinite(float(y)):
            continue
        per[s] = max(per.get(s, 0.0), float(y))  # any positive visit makes the subject positive
    subs = np.array(sorted(per), dtype=object)
    return subs, np.array([per[s] for s in subs])


def needs_stratification(labels: Optional[Sequence[float]]) -> bool:
    if labels is None:
        return False
    y = np.asarray(labels, dtype=np.float64)
    y = y[np.isfinite(y)]
    if not is_binary(y):
        return False
    rate = y.mean()
    return min(rate, 1.0 - rate) < MINORITY_STRATIFY


def make_splits(
    subject_ids: Sequence[str],
    labels: Optional[Sequence[float]] = None,
    outer_folds: int = 5,
    inner_folds: int = 4,
    seeds: Optional[Sequence[int]] = None,
) -> SplitPlan:
    """Subject-level outer folds for every seed.

    ``subject_ids`` may repeat (one entry per visit or sequence). Folds are
    stratified by subject label when ``labels`` is a binary target whose
    minority class is under 20%.
    """
    seeds = list(default_seeds() if seeds is None else seeds)
    if not seeds:
        raise ValueError("at least one seed required")
    stratify = needs_stratification(labels)
    if stratify:
        subjects, subj_labels = _subject_labels(subject_ids, labels)
        counts = np.unique(subj_labels, return_counts=True)[1]
        if len(counts) < 2:
            raise ValueError("stratified split needs both classes")
    else:
        subjects, subj_labels = np.array(sorted(set(subject_ids)), dtype=object), None
    if len(subjects) < outer_folds:
        raise ValueError(f"need at least {outer_folds} subjects, got {len(subjects)}")
    assignments = [_assign_folds(subjects, subj_labels, outer_folds, np.random.default_rng([int(s), 1]))
                   for s in seeds]
    plan = SplitPlan(subjects, seeds, assignments, outer_folds, inner_folds, stratify)
    plan.check_leakage()
    return plan


def inner_folds_for(train_subjects: np.ndarray, k: int, rng: np.random.Generator) -> List[np.ndarray]:
    if len(train_subjects) < k:
        raise ValueError("too few training subjects for the inner loop")
    return _assign_folds(np.sort(np.asarray(train_subjects, dtype=object)), None, k, rng)


# -- linear models ---------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0  # constant columns pass through as zeros
        return cls(mean, scale)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass
class LinearModel:
    """Coefficients on the original feature scale: ``y = X @ coef + intercept``."""

    coef: np.ndarray
    intercept: float
    alpha: float
    link: str = "identity"

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept

    def predict(self, X: np.ndarray) -> np.ndarray:
        z = self.decision(X)
        return _sigmoid(z) if self.link == "logit" else z


def _svd_filter(s: np.ndarray, alpha: float) -> np.ndarray:
    if alpha > 0:
        return s / (s * s + alpha)
    # alpha = 0: minimum-norm least squares
    tol = s.max(initial=0.0) * max(len(s), 1) * np.finfo(float).eps
    out = np.zeros_like(s)
    out[s > tol] = 1.0 / s[s > tol]
    return out


class RidgeSolver:
    """Thin SVD of standardized training features, reused across penalties and targets."""

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("X must be a non-empty 2-D array")
        self.std = Standardizer.fit(X)
        self.U, self.s, self.Vt = np.linalg.svd(self.std.transform(X), full_matrices=False)

    def coefficients(self, y: np.ndarray, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
        """Standardized-scale coefficients and intercepts for 1-D or 2-D ``y``."""
        y = np.asarray(y, dtype=np.float64)
        ybar = y.mean(axis=0)
        beta = self.Vt.T @ (_svd_filter(self.s, alpha)[:, None] * (self.U.T @ (y - ybar).reshape(len(y), -1)))
        return (beta[:, 0] if y.ndim == 1 else beta), ybar

    def predict_path(self, X_test: np.ndarray, Y: np.ndarray, alphas: Sequence[float]) -> np.ndarray:
        """Predictions ``(len(alphas), n_test, n_targets)`` for every penalty."""
        Y = np.asarray(Y, dtype=np.float64).reshape(self.U.shape[0], -1)
        ybar = Y.mean(axis=0)
        A = self.std.transform(np.asarray(X_test, dtype=np.float64)) @ self.Vt.T
        B = self.U.T @ (Y - ybar)
        return np.stack([A @ (_svd_filter(self.s, a)[:, None] * B) + ybar for a in alphas])

    def model(self, y: np.ndarray, alpha: float) -> LinearModel:
        beta_s, ybar = self.coefficients(y, alpha)
        coef = beta_s / self.std.scale
        return LinearModel(coef, float(ybar - self.std.mean @ coef), float(alpha))


def ridge_fit(X: np.ndarray, y: np.ndarray, alpha: float) -> LinearModel:
    """Ridge on standardized features with an unpenalized intercept.

    Solved through the SVD; ``alpha = 0`` gives the minimum-norm least-squares fit.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError("y must be 1-D and match X")
    return RidgeSolver(X).model(y, alpha)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticSolver:
    """Penalized logistic regression in the row space of the standardized features.

    The optimal coefficient vector lies in that space, so fitting on the
    SVD coordinates is exact and keeps Newton steps small when features
    outnumber samples.
    """

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        self.std = Standardizer.fit(X)
        U, s, Vt = np.linalg.svd(self.std.transform(X), full_matrices=False)
        keep = s > s.max(initial=0.0) * max(X.shape) * np.finfo(float).eps
        self.Z = U[:, keep] * s[keep]
        self.Vt = Vt[keep]

    def fit_reduced(self, y: np.ndarray, alpha: float, start: Optional[np.ndarray] = None,
                    tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        classes = np.unique(y)
        if len(classes) < 2:
            raise ValueError("logistic fit needs both classes in the training data")
        n, r = self.Z.shape
        Zi = np.hstack([np.ones((n, 1)), self.Z])
        pen = np.full(r + 1, float(alpha))
        pen[0] = 0.0
        w = np.zeros(r + 1) if start is None else start.copy()
        if start is None:
            rate = np.clip(y.mean(), 1e-6, 1 - 1e-6)
            w[0] = math.log(rate / (1 - rate))

        def objective(v):
            z = Zi @ v
            return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * float((pen * v) @ v))

        f = objective(w)
        for _ in range(max_iter):
            p = _sigmoid(Zi @ w)
            grad = Zi.T @ (p - y) / n + pen * w
            if np.linalg.norm(grad) < tol:
                break
            H = (Zi * (p * (1 - p))[:, None]).T @ Zi / n + np.diag(pen)
            H[np.diag_indices_from(H)] += 1e-12
            step = np.linalg.solve(H, grad)
            t = 1.0
            while True:
                cand = w - t * step
                fc = objective(cand)
                if fc <= f - 1e-4 * t * float(grad @ step) or t < 1e-10:
                    break
                t *= 0.5
            w, f = cand, fc
        return w

    def model(self, y: np.ndarray, alpha: float, start: Optional[np.ndarray] = None) -> Tuple[LinearModel, np.ndarray]:
        w = self.fit_reduced(y, alpha, start)
        beta_s = self.Vt.T @ w[1:]
        coef = beta_s / self.std.scale
        return LinearModel(coef, float(w[0] - self.std.mean @ coef), float(alpha), "logit"), w


def logistic_fit(X: np.ndarray, y: np.ndarray, alpha: float) -> LinearModel:
    """Minimise mean log-loss + ``alpha * |beta|^2 / 2`` on standardized features."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if not is_binary(y):
        raise ValueError("logistic targets must be 0/1")
    return LogisticSolver(X).model(y, alpha)[0]


# -- inner search and late fusion ---------------------------------------------

def draw_alphas(rng: np.random.Generator, draws: int = 20, low: float = ALPHA_RANGE[0], high: float = ALPHA_RANGE[1]) -> np.ndarray:
    return np.sort(np.exp(rng.uniform(math.log(low), math.log(high), size=draws)))


def late_fuse(keys: Sequence, predictions: np.ndarray) -> Tuple[List, np.ndarray, np.ndarray]:
    """Average predictions sharing a key; returns (unique keys, means, counts)."""
    preds = np.asarray(predictions, dtype=np.float64)
    uniq: Dict[object, int] = {}
    idx = np.empty(len(keys), dtype=np.int64)
    for i, k in enumerate(keys):
        idx[i] = uniq.setdefault(k, len(uniq))
    counts = np.bincount(idx, minlength=len(uniq)).astype(np.float64)
    shape = (len(uniq),) + preds.shape[1:]
    sums = np.zeros(shape)
    np.add.at(sums, idx, preds)
    means = sums / counts.reshape((-1,) + (1,) * (preds.ndim - 1))
    return list(uniq), means, counts


def _fuse_index(visit_idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    uniq, inv = np.unique(visit_idx, return_inverse=True)
    return uniq, inv


def _fused(values: np.ndarray, inv: np.ndarray, n_groups: int) -> np.ndarray:
    """Mean of sample rows ``(n, T)`` per visit group."""
    sums = np.zeros((n_groups, values.shape[1]))
    np.add.at(sums, inv, values)
    return sums / np.bincount(inv, minlength=n_groups)[:, None]


@dataclass
class Design:
    """Sequence-level design matrix with the subject-visit each row belongs to."""

    subjects: np.ndarray  # (n,) subject id per row
    visit_index: np.ndarray  # (n,) row into visit_keys
    visit_keys: List[Tuple[str, str]]
    X: np.ndarray
    feature_names: List[str]

    def __post_init__(self):
        if self.X.shape[0] != len(self.subjects) or len(self.visit_index) != len(self.subjects):
            raise ValueError("design rows disagree")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("design matrix has non-finite entries")


def build_design(
    sample_keys: Sequence[Tuple[str, str, Activity]],
    features: Optional[np.ndarray],
    covariates: Optional[Mapping[Tuple[str, str], Mapping[str, float]]] = None,
    covariate_names: Sequence[str] = (),
    activity_onehot: bool = True,
    feature_prefix: str = "emb",
) -> Design:
    """Embeddings (or none) plus per-visit covariates plus one-hot activity."""
    n = len(sample_keys)
    blocks, names = [], []
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != n:
            raise ValueError("features and sample keys disagree")
        blocks.append(features)
        names += [f"{feature_prefix}{i}" for i in range(features.shape[1])]
    if covariate_names:
        if covariates is None:
            raise ValueError("covariate values missing")
        blocks.append(np.array([[covariates[(s, v)][c] for c in covariate_names] for s, v, _ in sample_keys], dtype=np.float64))
        names += list(covariate_names)
    if activity_onehot and features is not None:
        acts = sorted({int(a) for _, _, a in sample_keys})
        if len(acts) > 1:
            blocks.append(np.array([[float(int(a) == c) for c in acts] for _, _, a in sample_keys]))
            names += [f"activity_{Activity(c).name}" for c in acts]
    if not blocks:
        raise ValueError("empty design")
    visit_keys = sorted({(s, v) for s, v, _ in sample_keys})
    lookup = {k: i for i, k in enumerate(visit_keys)}
    return Design(
        subjects=np.array([s for s, _, _ in sample_keys], dtype=object),
        visit_index=np.array([lookup[(s, v)] for s, v, _ in sample_keys], dtype=np.int64),
        visit_keys=visit_keys,
        X=np.hstack(blocks),
        feature_names=names,
    )


def subset_design(design: Design, visit_keys: Sequence[Tuple[str, str]]) -> Design:
    """Rows of ``design`` whose subject-visit is in ``visit_keys``, re-indexed."""
    wanted = set(visit_keys)
    rows = [i for i, vi in enumerate(design.visit_index) if design.visit_keys[vi] in wanted]
    keys = sorted({design.visit_keys[design.visit_index[i]] for i in rows})
    lookup = {k: i for i, k in enumerate(keys)}
    return Design(design.subjects[rows], np.array([lookup[design.visit_keys[design.visit_index[i]]] for i in rows], dtype=np.int64),
                  keys, design.X[rows], design.feature_names)


@dataclass
class FoldResult:
    alphas: np.ndarray  # chosen penalty per target
    test_visits: np.ndarray  # visit indices, fused
    predictions: np.ndarray  # (n_test_visits, T)
    scores: np.ndarray  # (T,)


def _rows_for(design: Design, subjects: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.isin(design.subjects, subjects))


def _score_columns(Y: np.ndarray, P: np.ndarray, kind: str) -> np.ndarray:
    return np.array([metric(Y[:, t], P[:, t], kind) for t in range(Y.shape[1])])


def inner_search(
    design: Design,
    Y_visit: np.ndarray,
    train_subjects: np.ndarray,
    binary: bool,
    rng: np.random.Generator,
    inner_folds: int = 4,
    draws: int = 20,
    alphas: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Pick one penalty per target by mean inner-fold score (R^2 or AUC).

    Candidates are ``draws`` log-uniform samples on [1e-3, 1e3] unless given;
    ties go to the smaller penalty.
    """
    cand = draw_alphas(rng, draws) if alphas is None else np.sort(np.asarray(alphas, dtype=np.float64))
    folds = inner_folds_for(train_subjects, inner_folds, rng)
    T = Y_visit.shape[1]
    totals = np.zeros((len(cand), T))
    counts = np.zeros((len(cand), T))
    kind = "auc" if binary else "r2"
    for held in folds:
        tr = _rows_for(design, np.setdiff1d(train_subjects, held))
        te = _rows_for(design, held)
        y_tr = Y_visit[design.visit_index[tr]]
        vis, inv = _fuse_index(design.visit_index[te])
        y_te = Y_visit[vis]
        if binary:
            solver = LogisticSolver(design.X[tr])
            path = np.zeros((len(cand), len(te), T))
            for t in range(T):
                if len(np.unique(y_tr[:, t])) < 2:
                    path[:, :, t] = np.nan
                    continue
                w = None
                for a_i, a in enumerate(cand[::-1]):  # warm start from strong penalties
                    model, w = solver.model(y_tr[:, t], a, w)
                    path[len(cand) - 1 - a_i, :, t] = model.decision(design.X[te])
        else:
            path = RidgeSolver(design.X[tr]).predict_path(design.X[te], y_tr, cand)
        for a_i in range(len(cand)):
            sc = _score_columns(y_te, _fused(path[a_i], inv, len(vis)), kind)
            ok = np.isfinite(sc)
            totals[a_i, ok] += sc[ok]
            counts[a_i, ok] += 1
    with np.errstate(invalid="ignore"):
        mean = np.where(counts > 0, totals / np.maximum(counts, 1), -np.inf)
    # argmax returns the first maximum, i.e. the smallest penalty on ties
    return cand[np.argmax(mean, axis=0)]


def run_fold(
    design: Design,
    Y_visit: np.ndarray,
    train_subjects: np.ndarray,
    test_subjects: np.ndarray,
    binary: bool,
    rng: np.random.Generator,
    inner_folds: int = 4,
    draws: int = 20,
) -> FoldResult:
    chosen = inner_search(design, Y_visit, train_subjects, binary, rng, inner_folds, draws)
    tr = _rows_for(design, train_subjects)
    te = _rows_for(design, test_subjects)
    y_tr = Y_visit[design.visit_index[tr]]
    vis, inv = _fuse_index(design.visit_index[te])
    T = Y_visit.shape[1]
    if binary:
        solver = LogisticSolver(design.X[tr])
        raw = np.column_stack([solver.model(y_tr[:, t], chosen[t])[0].decision(design.X[te]) for t in range(T)])
    else:
        uniq_alphas, which = np.unique(chosen, return_inverse=True)
        path = RidgeSolver(design.X[tr]).predict_path(design.X[te], y_tr, uniq_alphas)
        raw = path[which, :, np.arange(T)].T
    fused = _fused(raw, inv, len(vis))
    scores = _score_columns(Y_visit[vis], fused, "auc" if binary else "pearson")
    return FoldResult(chosen, vis, fused, scores)


@dataclass
class CVResult:
    """Per-(seed, fold) scores and per-seed out-of-fold visit predictions."""

    scores: np.ndarray  # (seeds, folds, T)
    oof: np.ndarray  # (seeds, n_visits, T)
    alphas: np.ndarray  # (seeds, folds, T)

    def seed_scores(self) -> np.ndarray:
        """Mean over folds per seed, ``(seeds, T)``; folds with undefined scores are skipped."""
        with np.errstate(invalid="ignore"):
            s = np.nanmean(np.where(np.isfinite(self.scores), self.scores, np.nan), axis=1)
        return s


def cross_validate(
    design: Design,
    Y_visit: np.ndarray,
    plan: SplitPlan,
    binary: bool = False,
    draws: int = 20,
    jobs: int = 1,
) -> CVResult:
    """Nested CV for every target column of ``Y_visit`` (no missing values)."""
    Y_visit = np.asarray(Y_visit, dtype=np.float64).reshape(len(design.visit_keys), -1)
    if not np.all(np.isfinite(Y_visit)):
        raise ValueError("targets passed to cross_validate must be complete")
    n_seeds, n_folds, T = len(plan.seeds), plan.outer_folds, Y_visit.shape[1]

    def one_seed(si: int):
        res = []
        for fi, (train, test) in enumerate(plan.folds(si)):
            rng = np.random.default_rng([plan.seeds[si], fi, 2])
            res.append(run_fold(design, Y_visit, train, test, binary, rng, plan.inner_folds, draws))
        return res

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(one_seed, range(n_seeds)))
    else:
        per_seed = [one_seed(si) for si in range(n_seeds)]
    scores = np.full((n_seeds, n_folds, T), np.nan)
    alphas = np.full((n_seeds, n_folds, T), np.nan)
    oof = np.full((n_seeds, len(design.visit_keys), T), np.nan)
    for si, folds in enumerate(per_seed):
        for fi, fr in enumerate(folds):
            scores[si, fi] = fr.scores
            alphas[si, fi] = fr.alphas
            oof[si, fr.test_visits] = fr.predictions
    return CVResult(scores, oof, alphas)


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    target: str
    family: str
    mode: str  # "gain" or "direct"
    metric: str  # "r" or "auc"
    n_visits: int
    baseline_scores: Optional[np.ndarray]  # per seed
    full_scores: np.ndarray  # per seed
    median_baseline: float
    median_full: float
    delta: float
    t_stat: float
    p_value: float
    q_value: float = float("nan")
    significant: bool = False
    pooled_r: float = float("nan")  # direct mode: r of seed-averaged out-of-fold predictions
    cells: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)  # model -> (seeds, folds)

    REPORT_COLUMNS = ("target", "family", "mode", "metric", "n_visits", "median_baseline", "median_full",
                      "delta", "t_stat", "p_value", "q_value", "significant", "pooled_r")

    def row(self) -> list:
        return [self.target, self.family, self.mode, self.metric, self.n_visits,
                _round(self.median_baseline), _round(self.median_full), _round(self.delta),
                _round(self.t_stat), _round(self.p_value), _round(self.q_value), int(self.significant),
                _round(self.pooled_r)]


def _round(x: float) -> float:
    # fixed precision keeps report files stable across platforms' last-ulp noise
    return float(f"{x:.10g}") if x is not None and math.isfinite(x) else float("nan")


def _target_groups(Y: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Group target columns by (missingness pattern, binary-ness)."""
    groups: Dict[Tuple[bytes, bool], List[int]] = {}
    for t in range(Y.shape[1]):
        ok = np.isfinite(Y[:, t])
        groups.setdefault((ok.tobytes(), is_binary(Y[ok, t])), []).append(t)
    out = []
    for (mask_bytes, _), cols in groups.items():
        out.append((np.frombuffer(mask_bytes, dtype=bool), np.array(cols)))
    return out


def _visit_targets(design: Design, targets: Mapping[Tuple[str, str], Mapping[str, float]], names: Sequence[str]) -> np.ndarray:
    Y = np.full((len(design.visit_keys), len(names)), np.nan)
    for i, key in enumerate(design.visit_keys):
        row = targets.get(key, {})
        for t, n in enumerate(names):
            v = row.get(n)
            if v is not None:
                Y[i, t] = float(v)
    return Y


def _plan_for(sub: Design, y_cols: np.ndarray, binary: bool, outer_folds: int, inner_folds: int, seeds: Sequence[int]) -> SplitPlan:
    labels = None
    if binary and y_cols.shape[1] == 1:
        labels = y_cols[sub.visit_index, 0]
    return make_splits(list(sub.subjects), labels, outer_folds, inner_folds, seeds)


def _evaluate_groups(designs: Sequence[Design], Y: np.ndarray, outer_folds: int, inner_folds: int,
                     seeds: Sequence[int], draws: int, jobs: int):
    """Run cross_validate on each design for every target group; yields per-target results."""
    results: Dict[int, Tuple[bool, int, List[CVResult], np.ndarray]] = {}
    for ok, cols in _target_groups(Y):
        keys = [k for k, good in zip(designs[0].visit_keys, ok) if good]
        y_sub = Y[ok][:, cols]
        binary = is_binary(y_sub)
        # stratified plans depend on the label, so binary targets run one at a time
        batches = [np.array([c]) for c in range(len(cols))] if binary else [np.arange(len(cols))]
        for b in batches:
            subs = [subset_design(d, keys) for d in designs]
            plan = _plan_for(subs[0], y_sub[:, b], binary, outer_folds, inner_folds, seeds)
            cvs = [cross_validate(s, y_sub[:, b], plan, binary, draws, jobs) for s in subs]
            for j, c in enumerate(b):
                sliced = [CVResult(cv.scores[..., j:j + 1], cv.oof[..., j:j + 1], cv.alphas[..., j:j + 1]) for cv in cvs]
                results[int(cols[c])] = (binary, len(keys), sliced, y_sub[:, c])
    return results


def paired_t_test(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """Two-sided paired t-test; constant differences give t = 0, p = 1 (all zero) or p = 0."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if len(diff) < 2:
        return 0.0, 1.0
    if np.all(diff == diff[0]):
        if diff[0] == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff[0]), 0.0
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


def _seed_vector(cv: CVResult) -> np.ndarray:
    return cv.seed_scores()[:, 0]


def compare_models(
    baseline: Design,
    full: Design,
    targets: Mapping[Tuple[str, str], Mapping[str, float]],
    target_names: Sequence[str],
    families: Optional[Mapping[str, str]] = None,
    outer_folds: int = 5,
    inner_folds: int = 4,
    seeds: Optional[Sequence[int]] = None,
    draws: int = 20,
    q_threshold: float = 0.1,
    jobs: int = 1,
) -> List[EvalReport]:
    """Baseline (covariates) versus full (covariates + embeddings) under identical splits.

    Per-seed scores are fold means; a paired two-sided t-test over seeds gives
    p, Benjamini-Hochberg within each family gives q, and a target counts as a
    significant gain when q is under the threshold and the median improves.
    """
    if baseline.visit_keys != full.visit_keys or not np.array_equal(baseline.subjects, full.subjects):
        raise ValueError("baseline and full designs must cover the same samples in the same order")
    seeds = list(default_seeds() if seeds is None else seeds)
    Y = _visit_targets(full, targets, target_names)
    results = _evaluate_groups([baseline, full], Y, outer_folds, inner_folds, seeds, draws, jobs)
    reports = []
    for t, name in enumerate(target_names):
        if t not in results:
            continue
        binary, n_vis, (cv_b, cv_f), _ = results[t]
        sb, sf = _seed_vector(cv_b), _seed_vector(cv_f)
        ok = np.isfinite(sb) & np.isfinite(sf)
        t_stat, p = paired_t_test(sf[ok], sb[ok])
        mb, mf = float(np.nanmedian(sb)), float(np.nanmedian(sf))
        reports.append(EvalReport(name, (families or {}).get(name, "all"), "gain", "auc" if binary else "r",
                                  n_vis, sb, sf, mb, mf, mf - mb, t_stat, p,
                                  cells={"baseline": cv_b.scores[..., 0], "full": cv_f.scores[..., 0]}))
    _apply_fdr(reports, q_threshold, require_gain=True)
    return reports


def direct_predict(
    design: Design,
    targets: Mapping[Tuple[str, str], Mapping[str, float]],
    target_names: Sequence[str],
    families: Optional[Mapping[str, str]] = None,
    outer_folds: int = 5,
    inner_folds: int = 4,
    seeds: Optional[Sequence[int]] = None,
    draws: int = 20,
    q_threshold: float = 0.05,
    jobs: int = 1,
) -> List[EvalReport]:
    """Embeddings as the only inputs.

    The reported score is the median over seeds of the fold-mean score; the
    p-value is that of Pearson's r between targets and the out-of-fold
    predictions averaged over seeds.
    """
    seeds = list(default_seeds() if seeds is None else seeds)
    Y = _visit_targets(design, targets, target_names)
    results = _evaluate_groups([design], Y, outer_folds, inner_folds, seeds, draws, jobs)
    reports = []
    for t, name in enumerate(target_names):
        if t not in results:
            continue
        binary, n_vis, (cv,), y = results[t]
        sf = _seed_vector(cv)
        pooled = cv.oof[:, :, 0].mean(axis=0)
        if np.std(pooled) == 0 or np.std(y) == 0:
            r, p = 0.0, 1.0
        else:
            r, p = stats.pearsonr(y, pooled)
            r, p = float(r), float(p)
        mf = float(np.nanmedian(sf))
        reports.append(EvalReport(name, (families or {}).get(name, "all"), "direct", "auc" if binary else "r",
                                  n_vis, None, sf, float("nan"), mf, float("nan"), float("nan"), p,
                                  pooled_r=r, cells={"full": cv.scores[..., 0]}))
    _apply_fdr(reports, q_threshold, require_gain=False)
    return reports


def _apply_fdr(reports: List[EvalReport], q_threshold: float, require_gain: bool) -> None:
    """BH within each family; a hit also needs a positive effect (gain, or pooled r when direct)."""
    fams: Dict[str, List[int]] = {}
    for i, r in enumerate(reports):
        fams.setdefault(r.family, []).append(i)
    for fam, idx in fams.items():
        q = bh_adjust([reports[i].p_value for i in idx])
        for i, qi in zip(idx, q):
            reports[i].q_value = float(qi)
            effect = reports[i].delta if require_gain else reports[i].pooled_r
            sig = qi <= q_threshold and effect > 0
            reports[i].significant = bool(sig)
