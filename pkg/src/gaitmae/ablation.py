"""Anatomical attribution: drop one joint group or keep only it, re-embed, re-score."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .evaluation import _evaluate_groups, _seed_vector, _visit_targets, build_design, default_seeds
from .pooling import embed_dataset, records_matrix
from .skeleton import ATTRIBUTION_GROUP_ORDER, N_JOINTS, TAXONOMY, TREADMILL_ACTIVITIES, SkeletonSequence

logger = logging.getLogger(__name__)


def zero_joints(seq: SkeletonSequence, joints: Sequence[int]) -> SkeletonSequence:
    """Zero every channel (coordinates and confidence) of the given joints."""
    data = seq.data.copy()
    data[:, list(joints), :] = 0.0
    return seq.with_data(data)


def minmax(values: Sequence[float]) -> Tuple[np.ndarray, bool]:
    """Rescale to [0, 1]; a constant input maps to zeros and is flagged degenerate."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v), True
    return (v - lo) / (hi - lo), False


def importance(delta_drops: Sequence[float], r_solos: Sequence[float]) -> Dict[str, object]:
    """Composite score: min-max each component, sum, then min-max the sum."""
    if len(delta_drops) != len(r_solos):
        raise ValueError("one drop and one isolation score per group")
    d_hat, d_deg = minmax(delta_drops)
    r_hat, r_deg = minmax(r_solos)
    total, t_deg = minmax(d_hat + r_hat)
    return {"delta_hat": d_hat, "r_hat": r_hat, "importance": total,
            "degenerate": {"delta": d_deg, "r": r_deg, "importance": t_deg}}


@dataclass
class ImportanceTable:
    target: str
    family: str
    groups: Tuple[str, ...]
    s_baseline: float
    delta_drop: np.ndarray
    r_solo: np.ndarray
    delta_hat: np.ndarray
    r_hat: np.ndarray
    importance: np.ndarray
    degenerate: Dict[str, bool] = field(default_factory=dict)

    HEADER = ("target", "family", "group", "delta_drop", "r_solo", "delta_hat", "r_hat", "I", "s_baseline")

    def rows(self) -> List[list]:
        return [[self.target, self.family, g, float(self.delta_drop[i]), float(self.r_solo[i]),
                 float(self.delta_hat[i]), float(self.r_hat[i]), float(self.importance[i]), float(self.s_baseline)]
                for i, g in enumerate(self.groups)]


@dataclass
class AttributionRun:
    """Shared state for all conditions of one attribution analysis."""

    sequences: List[SkeletonSequence]
    encoder: object
    targets: Mapping[Tuple[str, str], Mapping[str, float]]
    target_names: List[str]
    variant: str = "V5"
    covariates: Optional[Mapping[Tuple[str, str], Mapping[str, float]]] = None
    covariate_names: Tuple[str, ...] = ()
    outer_folds: int = 5
    inner_folds: int = 4
    seeds: List[int] = field(default_factory=default_seeds)
    draws: int = 20
    jobs: int = 1

    def scores(self, zeroed: Sequence[int]) -> Dict[str, float]:
        """Median-of-seeds score per target with ``zeroed`` joints blanked in the inputs."""
        seqs = [zero_joints(s, zeroed) for s in self.sequences] if len(zeroed) else self.sequences
        recs = embed_dataset(seqs, self.encoder, self.variant)[self.variant]
        keys, X = records_matrix(recs)
        design = build_design(keys, X, self.covariates, self.covariate_names)
        Y = _visit_targets(design, self.targets, self.target_names)
        results = _evaluate_groups([design], Y, self.outer_folds, self.inner_folds, self.seeds, self.draws, self.jobs)
        return {name: float(np.nanmedian(_seed_vector(results[t][2][0])))
                for t, name in enumerate(self.target_names) if t in results}


def treadmill_only(sequences: Sequence[SkeletonSequence]) -> List[SkeletonSequence]:
    kept = [s for s in sequences if s.activity in TREADMILL_ACTIVITIES]
    if len(kept) < len(sequences):
        logger.warning("attribution uses treadmill walking only; ignoring %d other sequences", len(sequences) - len(kept))
    if not kept:
        raise ValueError("no treadmill sequences to attribute")
    return kept


def masked_drop(run: AttributionRun, group_joints: Sequence[int], baseline: Mapping[str, float]) -> Dict[str, float]:
    """``S_baseline - S_masked`` with the group's joints zeroed."""
    masked = run.scores(group_joints)
    return {k: baseline[k] - masked[k] for k in masked}


def isolation_score(run: AttributionRun, group_joints: Sequence[int]) -> Dict[str, float]:
    """Score with every joint outside the group zeroed."""
    keep = set(group_joints)
    return run.scores([j for j in range(N_JOINTS) if j not in keep])


def attribute(
    run: AttributionRun,
    families: Optional[Mapping[str, str]] = None,
    groups: Sequence[str] = ATTRIBUTION_GROUP_ORDER,
    check_controls: bool = True,
) -> Tuple[List[ImportanceTable], Dict[str, Dict[str, float]]]:
    """Importance tables per target plus the internal-control results.

    Controls: dropping no joints must change nothing and isolating all joints
    must reproduce the baseline; both are asserted exactly.
    """
    run.sequences = treadmill_only(run.sequences)
    baseline = run.scores([])
    controls = {"drop_none": masked_drop(run, [], baseline), "isolate_all": isolation_score(run, range(N_JOINTS))}
    logger.info("attribution controls: %s", controls)
    if check_controls:
        for name in baseline:
            if controls["drop_none"][name] != 0.0:
                raise AssertionError(f"{name}: dropping no joints changed the score by {controls['drop_none'][name]}")
            if controls["isolate_all"][name] != baseline[name]:
                raise AssertionError(f"{name}: isolating all joints does not reproduce the baseline score")
    drops = {g: masked_drop(run, TAXONOMY.attribution_groups[g], baseline) for g in groups}
    solos = {g: isolation_score(run, TAXONOMY.attribution_groups[g]) for g in groups}
    tables = []
    for name in run.target_names:
        if name not in baseline:
            continue
        d = np.array([drops[g][name] for g in groups])
        r = np.array([solos[g][name] for g in groups])
        imp = importance(d, r)
        tables.append(ImportanceTable(name, (families or {}).get(name, "all"), tuple(groups), baseline[name],
                                      d, r, imp["delta_hat"], imp["r_hat"], imp["importance"], imp["degenerate"]))
    return tables, controls


def system_rollup(tables: Sequence[ImportanceTable], top_k: int = 10) -> Dict[str, Dict[str, float]]:
    """Mean importance per group over each family's ``top_k`` best-predicted targets."""
    fams: Dict[str, List[ImportanceTable]] = {}
    for t in tables:
        fams.setdefault(t.family, []).append(t)
    out = {}
    for fam, items in sorted(fams.items()):
        ranked = sorted(items, key=lambda t: (-np.nan_to_num(t.s_baseline, nan=-np.inf), t.target))[:top_k]
        groups = ranked[0].groups
        out[fam] = {g: float(np.mean([t.importance[i] for t in ranked])) for i, g in enumerate(groups)}
    return out
