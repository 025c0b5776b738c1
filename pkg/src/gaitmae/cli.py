"""Command-line pipeline: generate, preprocess, features, pretrain, embed, evaluate, ablate, report."""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import ConfigError, format_config, load_config
from .io import FormatError, read_gsk, read_target_table, read_tsv, write_gsk, write_target_table, write_tsv
from .skeleton import (
    DEFAULT_LENGTH,
    Activity,
    SkeletonSequence,
    median_filter,
    normalize_frames,
    preprocess,
    window_to_length,
)

logger = logging.getLogger("gaitmae")

MANIFEST = "manifest.tsv"
TARGETS = "targets.tsv"
FAMILIES = "families.tsv"
RESOLVED = "resolved_config.txt"
MANIFEST_HEADER = ["file", "subject_id", "visit_id", "activity", "sequence_index", "frames", "sha256"]


class CliError(Exception):
    """A user-facing failure; printed without a traceback."""


# -- helpers -------------------------------------------------------------------

def resolve_seed(arg: Optional[int]) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("GAITMAE_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"GAITMAE_SEED must be an integer, got {env!r}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@contextmanager
def staged_dir(out: Path, force: bool = False) -> Iterator[Path]:
    """Write into a sibling temp dir and move it into place only on success."""
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


@contextmanager
def staged_file(out: Path) -> Iterator[Path]:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, name = tempfile.mkstemp(prefix=f".{out.name}.", suffix=out.suffix, dir=out.parent)
    os.close(fd)
    tmp = Path(name)
    try:
        yield tmp
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, out)


def check_tsv(path: Path, header: Sequence[str]) -> None:
    """Read a freshly written table back and confirm its column header."""
    got, _, _ = read_tsv(path)
    if got != list(header):
        raise CliError(f"{path.name} failed validation: columns {got} != {list(header)}")


def write_resolved(directory: Path, command: str, values: Dict[str, object]) -> None:
    body = {"command": command, "version": __version__, **values}
    (directory / RESOLVED).write_text(format_config(body), encoding="utf-8")


def write_manifest(directory: Path, seqs: Sequence[SkeletonSequence], kind: str) -> None:
    rows = []
    (directory / "sequences").mkdir(exist_ok=True)
    for seq in seqs:
        rel = f"sequences/{seq.subject_id}_{seq.visit_id}_{seq.activity.name}_{seq.sequence_index}.gsk"
        write_gsk(directory / rel, seq)
        rows.append([rel, seq.subject_id, seq.visit_id, seq.activity.name, seq.sequence_index, seq.n_frames,
                     _sha256(directory / rel)])
    write_tsv(directory / MANIFEST, MANIFEST_HEADER, rows, [f"kind={kind} sequences={len(rows)}"])
    check_tsv(directory / MANIFEST, MANIFEST_HEADER)


def load_dataset(directory: Path) -> Tuple[List[SkeletonSequence], Dict[str, str]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError(f"data directory not found: {directory}")
    if not (directory / MANIFEST).is_file():
        raise CliError(f"{directory} has no {MANIFEST}; create it with 'gaitmae generate'")
    header, rows, meta = read_tsv(directory / MANIFEST)
    if header != MANIFEST_HEADER:
        raise CliError(f"{directory / MANIFEST}: unexpected columns {header}")
    seqs = []
    for rel, *_rest, digest in rows:
        path = directory / rel
        if not path.is_file():
            raise CliError(f"manifest lists missing file {path}")
        if _sha256(path) != digest:
            raise CliError(f"checksum mismatch for {path}")
        seqs.append(read_gsk(path))
    return seqs, meta


def load_targets(path: Path):
    if not Path(path).is_file():
        raise CliError(f"target table not found: {path}")
    return read_target_table(path)


def load_families(path: Optional[Path], names: Sequence[str]) -> Dict[str, str]:
    from .synthetic import target_family

    fams = {n: target_family(n) for n in names}
    if path is not None and Path(path).is_file():
        header, rows, _ = read_tsv(path)
        if header[:2] != ["target", "family"]:
            raise CliError(f"{path}: expected columns target, family")
        fams.update({r[0]: r[1] for r in rows})
    return fams


def _configure_threads(jobs: int) -> None:
    import torch

    torch.set_num_threads(max(1, jobs))


def _ensure_preprocessed(seqs: List[SkeletonSequence], meta: Dict[str, str], length: int) -> List[SkeletonSequence]:
    if meta.get("kind") == "preprocessed":
        return seqs
    logger.info("data is not preprocessed; applying the default preprocessing in memory")
    return [preprocess(s, target=length) for s in seqs]


# -- commands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .synthetic import PARAM_RANGES, generate_dataset, target_family

    acts = [Activity.parse(a) for a in args.activities.split(",")]
    lo, hi = PARAM_RANGES["noise_std"]
    if not lo <= args.noise_max <= hi:
        raise CliError(f"--noise-max must lie in [{lo}, {hi}]")
    if args.subjects < 2 or args.visits < 1 or args.frames < 16:
        raise CliError("need --subjects >= 2, --visits >= 1, --frames >= 16")
    ds = generate_dataset(args.subjects, args.visits, acts, rng_seed=args.seed, frames=args.frames, fps=args.fps,
                          n_traits=args.traits, condition_prevalence=args.prevalence, noise_range=(0.0, args.noise_max))
    with staged_dir(Path(args.out), args.force) as tmp:
        write_manifest(tmp, ds.sequences, "raw")
        write_target_table(tmp / TARGETS, ds.targets, ds.target_columns)
        write_tsv(tmp / FAMILIES, ["target", "family"], [[c, target_family(c)] for c in ds.target_columns])
        write_resolved(tmp, "generate", {
            "seed": args.seed, "subjects": args.subjects, "visits": args.visits,
            "activities": [a.name for a in acts], "frames": args.frames, "fps": args.fps,
            "traits": args.traits, "prevalence": args.prevalence, "noise_max": args.noise_max,
        })
    print(f"wrote {len(ds.sequences)} sequences for {len(ds.targets)} subject-visits to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    seqs, meta = load_dataset(Path(args.data))
    if meta.get("kind") == "preprocessed":
        logger.warning("input is already preprocessed; filtering and normalising again")
    out_seqs, degenerate = [], 0
    for s in seqs:
        s = median_filter(window_to_length(s, args.length), args.window)
        s, bad = normalize_frames(s)
        degenerate += len(bad)
        out_seqs.append(s)
    with staged_dir(Path(args.out), args.force) as tmp:
        write_manifest(tmp, out_seqs, "preprocessed")
        for name in (TARGETS, FAMILIES):
            if (Path(args.data) / name).is_file():
                shutil.copyfile(Path(args.data) / name, tmp / name)
        write_resolved(tmp, "preprocess", {"seed": args.seed, "length": args.length, "window": args.window,
                                           "source": str(args.data)})
    print(f"preprocessed {len(out_seqs)} sequences into {args.out} ({degenerate} degenerate frames)")
    return 0


def cmd_features(args) -> int:
    from .features import extract_features, feature_matrix, feature_table_rows, reduce_redundancy

    seqs, _ = load_dataset(Path(args.data))
    vectors = [extract_features(s) for s in seqs]
    header, rows = feature_table_rows(vectors)
    with staged_dir(Path(args.out), args.force) as tmp:
        write_tsv(tmp / "features.tsv", header, rows)
        keys, names, X = feature_matrix(vectors)
        kept: List[str] = []
        if X.shape[0] >= 2 and X.shape[1] >= 1:
            kept = reduce_redundancy(X, names, args.threshold)
        write_tsv(tmp / "features_reduced.tsv", ["subject_id", "visit_id", *kept],
                  [[k[0], k[1], *[X[i, names.index(n)] for n in kept]] for i, k in enumerate(keys)],
                  [f"threshold={args.threshold} kept={len(kept)} of={len(names)}"])
        write_resolved(tmp, "features", {"seed": args.seed, "threshold": args.threshold, "source": str(args.data)})
    print(f"extracted features for {len(vectors)} sequences; {len(kept)} representative columns")
    return 0


def _pretrain_config(args):
    from .pretrain import PretrainConfig

    values: Dict[str, object] = {}
    if args.config:
        values.update(load_config(args.config))
    for key in ("steps", "epochs", "batch", "blocks", "dim", "heads", "crop"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.lr is not None:
        values["lr_max"] = args.lr
    values["seed"] = args.seed
    try:
        return PretrainConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise CliError(f"bad pretraining config: {exc}")


def cmd_pretrain(args) -> int:
    from .pretrain import EncoderState, pretrain

    _configure_threads(args.jobs)
    cfg = _pretrain_config(args)
    seqs, meta = load_dataset(Path(args.data))
    seqs = _ensure_preprocessed(seqs, meta, DEFAULT_LENGTH)
    resume = None
    extra = 0
    if args.resume:
        if not Path(args.resume).is_file():
            raise CliError(f"checkpoint not found: {args.resume}")
        resume = EncoderState.load(args.resume)
        extra = cfg.steps if cfg.steps > 0 else cfg.epochs * max(1, -(-len(seqs) // cfg.batch))
    result = pretrain(seqs, cfg, resume=resume, extra_steps=extra)
    with staged_dir(Path(args.out), args.force) as tmp:
        digest = result.state.save(tmp / "checkpoint.gmw")
        curve_cols = ["step", "lr", "mpjpe", "nmpjpe", "velocity", "total"]
        write_tsv(tmp / "loss_curve.tsv", curve_cols, [[r[c] for c in curve_cols] for r in result.curve])
        check_tsv(tmp / "loss_curve.tsv", curve_cols)
        if EncoderState.load(tmp / "checkpoint.gmw").step != result.state.step:
            raise CliError("checkpoint failed validation after writing")
        if result.evals:
            cols = sorted(result.evals[-1], key=lambda c: (c != "step", c))
            write_tsv(tmp / "evals.tsv", cols, [[e.get(c, float("nan")) for c in cols] for e in result.evals])
        write_resolved(tmp, "pretrain", {**cfg.to_dict(), "source": str(args.data),
                                         "resume": str(args.resume or ""), "checkpoint_sha256": digest})
    last = result.evals[-1] if result.evals else {}
    msg = f"final step {result.state.step}; held-in MPJPE {last.get('train_mpjpe', float('nan')):.5f}"
    if "holdout_mpjpe" in last:
        msg += f"; held-out MPJPE {last['holdout_mpjpe']:.5f}"
    logger.info(msg)
    print(msg)
    return 0


def cmd_embed(args) -> int:
    from .pooling import embed_dataset, parse_variant, read_embedding_table, write_embedding_table
    from .pretrain import EncoderState

    try:
        variant = parse_variant(args.variant)
    except ValueError as exc:
        raise CliError(str(exc))
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    _configure_threads(args.jobs)
    seqs, meta = load_dataset(Path(args.data))
    seqs = _ensure_preprocessed(seqs, meta, DEFAULT_LENGTH)
    digest = _sha256(Path(args.checkpoint))
    state = EncoderState.load(args.checkpoint)
    records = embed_dataset(seqs, state, variant)[variant]
    skipped = sum(r.skipped for r in records)
    if _sha256(Path(args.checkpoint)) != digest:
        raise CliError("checkpoint changed while embedding")
    with staged_file(Path(args.out)) as tmp:
        write_embedding_table(tmp, records, digest)
        if read_embedding_table(tmp)[0].get("checkpoint") != digest:
            raise CliError("embedding table failed validation after writing")
    print(f"embedded {len(records) - skipped} sequences with {variant} ({skipped} skipped) into {args.out}")
    return 0


def _split_names(text: Optional[str]) -> List[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def cmd_evaluate(args) -> int:
    from .evaluation import EvalReport, build_design, compare_models, default_seeds, direct_predict
    from .pooling import read_embedding_table, records_matrix

    if not Path(args.embeddings).is_file():
        raise CliError(f"embedding table not found: {args.embeddings}")
    meta, records = read_embedding_table(args.embeddings)
    columns, targets = load_targets(Path(args.targets))
    names = _split_names(args.target_names) or [c for c in columns if c not in _split_names(args.covariates)]
    unknown = [n for n in names + _split_names(args.covariates) if n not in columns]
    if unknown:
        raise CliError(f"unknown target or covariate columns: {unknown}")
    families = load_families(Path(args.families) if args.families else Path(args.targets).with_name(FAMILIES), names)
    keys, X = records_matrix(records)
    seeds = default_seeds(args.seed, args.n_seeds)
    common = dict(families=families, outer_folds=args.outer_folds, inner_folds=args.inner_folds,
                  seeds=seeds, draws=args.draws, jobs=args.jobs)
    if args.mode == "direct":
        design = build_design(keys, X)
        reports = direct_predict(design, targets, names, q_threshold=args.q_direct, **common)
    else:
        covs = _split_names(args.covariates)
        if not covs:
            raise CliError("--mode gain needs --covariates")
        base = build_design(keys, None, targets, covs)
        full = build_design(keys, X, targets, covs)
        reports = compare_models(base, full, targets, names, q_threshold=args.q_gain, **common)
    with staged_dir(Path(args.out), args.force) as tmp:
        write_tsv(tmp / "report.tsv", list(EvalReport.REPORT_COLUMNS), [r.row() for r in reports],
                  [f"mode={args.mode} variant={meta['variant']} checkpoint={meta['checkpoint']} seeds={len(seeds)}"])
        check_tsv(tmp / "report.tsv", EvalReport.REPORT_COLUMNS)
        cells = []
        for r in reports:
            for model, grid in sorted(r.cells.items()):
                for si in range(grid.shape[0]):
                    for fi in range(grid.shape[1]):
                        cells.append([r.target, model, seeds[si], fi, float(f"{grid[si, fi]:.10g}")])
        write_tsv(tmp / "cells.tsv", ["target", "model", "seed", "fold", "score"], cells)
        write_resolved(tmp, "evaluate", {
            "seed": args.seed, "mode": args.mode, "embeddings": str(args.embeddings), "targets": str(args.targets),
            "covariates": _split_names(args.covariates), "target_names": names, "outer_folds": args.outer_folds,
            "inner_folds": args.inner_folds, "n_seeds": args.n_seeds, "draws": args.draws,
            "q_threshold_direct": args.q_direct, "q_threshold_gain": args.q_gain,
        })
    sig = sum(r.significant for r in reports)
    print(f"evaluated {len(reports)} targets ({args.mode}); {sig} significant")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import AttributionRun, ImportanceTable, attribute, system_rollup
    from .evaluation import default_seeds
    from .pooling import parse_variant
    from .pretrain import EncoderState

    _configure_threads(args.jobs)
    seqs, meta = load_dataset(Path(args.data))
    seqs = _ensure_preprocessed(seqs, meta, DEFAULT_LENGTH)
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    columns, targets = load_targets(Path(args.targets))
    names = _split_names(args.target_names) or columns
    covs = tuple(_split_names(args.covariates))
    unknown = [n for n in list(names) + list(covs) if n not in columns]
    if unknown:
        raise CliError(f"unknown target or covariate columns: {unknown}")
    families = load_families(Path(args.targets).with_name(FAMILIES), names)
    run = AttributionRun(seqs, EncoderState.load(args.checkpoint), targets, list(names), parse_variant(args.variant),
                         targets if covs else None, covs, args.outer_folds, args.inner_folds,
                         default_seeds(args.seed, args.n_seeds), args.draws, args.jobs)
    tables, controls = attribute(run, families)
    rollup = system_rollup(tables, args.top_k)
    with staged_dir(Path(args.out), args.force) as tmp:
        write_tsv(tmp / "importance.tsv", list(ImportanceTable.HEADER), [row for t in tables for row in t.rows()])
        check_tsv(tmp / "importance.tsv", ImportanceTable.HEADER)
        groups = tables[0].groups if tables else ()
        write_tsv(tmp / "importance_pivot.tsv", ["target", *groups],
                  [[t.target, *[float(v) for v in t.importance]] for t in tables])
        write_tsv(tmp / "rollup.tsv", ["family", *groups], [[f, *[v[g] for g in groups]] for f, v in rollup.items()],
                  [f"top_k={args.top_k}"])
        write_tsv(tmp / "controls.tsv", ["target", "drop_none", "isolate_all", "s_baseline"],
                  [[t.target, controls["drop_none"][t.target], controls["isolate_all"][t.target], t.s_baseline]
                   for t in tables])
        write_resolved(tmp, "ablate", {"seed": args.seed, "variant": args.variant, "targets": str(args.targets),
                                       "target_names": list(names), "covariates": list(covs),
                                       "n_seeds": args.n_seeds, "draws": args.draws, "top_k": args.top_k})
    print(f"attributed {len(tables)} targets over {len(tables[0].groups) if tables else 0} groups; controls passed")
    return 0


def cmd_report(args) -> int:
    from .evaluation import EvalReport

    src = Path(args.run)
    report = src / "report.tsv"
    if not report.is_file():
        raise CliError(f"{src} has no report.tsv; run 'gaitmae evaluate' first")
    header, rows, meta = read_tsv(report)
    if header != list(EvalReport.REPORT_COLUMNS):
        raise CliError(f"{report}: unexpected columns")
    cells_path = src / "cells.tsv"
    summary = []
    if cells_path.is_file():
        _, cells, _ = read_tsv(cells_path)
        by: Dict[Tuple[str, str, str], List[float]] = {}
        for target, model, seed, _fold, score in cells:
            by.setdefault((target, model, seed), []).append(float(score))
        per_seed: Dict[Tuple[str, str], Dict[str, float]] = {}
        for (target, model, seed), vals in by.items():
            per_seed.setdefault((target, model), {})[seed] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
        for target in sorted({t for t, _ in per_seed}):
            full = per_seed.get((target, "full"), {})
            base = per_seed.get((target, "baseline"))
            vals = np.array([full[s] - (base[s] if base else 0.0) for s in sorted(full)])
            q = np.nanpercentile(vals, [0, 25, 50, 75, 100]) if np.isfinite(vals).any() else [float("nan")] * 5
            summary.append([target, "delta" if base else "score", *[float(f"{v:.10g}") for v in q]])
    idx = {c: i for i, c in enumerate(header)}
    lines = [f"# Evaluation summary ({meta.get('mode', '?')}, variant {meta.get('variant', '?')})", "",
             "| target | family | metric | baseline | full | delta | q | significant |",
             "|---|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append("| " + " | ".join(r[idx[c]] for c in ("target", "family", "metric", "median_baseline",
                                                          "median_full", "delta", "q_value", "significant")) + " |")
    with staged_dir(Path(args.out), args.force) as tmp:
        (tmp / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_tsv(tmp / "score_boxes.tsv", ["target", "quantity", "min", "q1", "median", "q3", "max"], summary)
        write_resolved(tmp, "report", {"seed": args.seed, "run": str(src)})
    print(f"report for {len(rows)} targets written to {args.out}")
    return 0


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (falls back to $GAITMAE_SEED, then 0)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads; 1 keeps runs bit-reproducible")
    common.add_argument("--force", action="store_true", help="replace an existing output directory")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="gaitmae", description=__doc__)
    p.add_argument("--version", action="version", version=f"gaitmae {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize a skeleton dataset")
    g.add_argument("--subjects", type=int, required=True)
    g.add_argument("--visits", type=int, default=1)
    g.add_argument("--activities", default="TreadmillFixed")
    g.add_argument("--frames", type=int, default=DEFAULT_LENGTH)
    g.add_argument("--fps", type=float, default=30.0)
    g.add_argument("--traits", type=int, default=8)
    g.add_argument("--prevalence", type=float, default=0.2)
    g.add_argument("--noise-max", type=float, default=0.02)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    pp = sub.add_parser("preprocess", parents=[common], help="median filter, normalise and window sequences")
    pp.add_argument("--data", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--length", type=int, default=DEFAULT_LENGTH)
    pp.add_argument("--window", type=int, default=3)
    pp.set_defaults(func=cmd_preprocess)

    f = sub.add_parser("features", parents=[common], help="engineered gait descriptors")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--threshold", type=float, default=0.85)
    f.set_defaults(func=cmd_features)

    t = sub.add_parser("pretrain", parents=[common], help="masked-autoencoder pretraining")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value file (blocks, dim, heads, lr_max, batch, epochs, mask.span, ...)")
    t.add_argument("--resume", help="checkpoint to continue from; --steps then counts additional steps")
    for name, typ in (("steps", int), ("epochs", int), ("batch", int), ("blocks", int), ("dim", int),
                      ("heads", int), ("crop", int), ("lr", float)):
        t.add_argument(f"--{name}", type=typ, default=None)
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("embed", parents=[common], help="pool frozen-encoder latents")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--variant", default="v5")
    e.add_argument("--out", required=True, help=".tsv for text, .gem for binary")
    e.set_defaults(func=cmd_embed)

    def cv_args(q):
        q.add_argument("--targets", required=True)
        q.add_argument("--target-names", help="comma-separated subset of target columns")
        q.add_argument("--covariates", help="comma-separated covariate columns")
        q.add_argument("--outer-folds", type=int, default=5)
        q.add_argument("--inner-folds", type=int, default=4)
        q.add_argument("--n-seeds", type=int, default=15)
        q.add_argument("--draws", type=int, default=20)
        q.add_argument("--out", required=True)

    v = sub.add_parser("evaluate", parents=[common], help="direct prediction or gain over covariates")
    v.add_argument("--embeddings", required=True)
    v.add_argument("--mode", choices=("direct", "gain"), default="direct")
    v.add_argument("--families", help="TSV of target, family (defaults to families.tsv next to the targets)")
    v.add_argument("--q-direct", type=float, default=0.05)
    v.add_argument("--q-gain", type=float, default=0.1)
    cv_args(v)
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", parents=[common], help="joint-group attribution on treadmill walking")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--variant", default="v5")
    a.add_argument("--top-k", type=int, default=10)
    cv_args(a)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", parents=[common], help="summarise an evaluation run")
    r.add_argument("--run", required=True, help="output directory of 'gaitmae evaluate'")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.seed = resolve_seed(args.seed)
        if args.jobs < 1:
            raise CliError("--jobs must be >= 1")
        return args.func(args)
    except (CliError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
