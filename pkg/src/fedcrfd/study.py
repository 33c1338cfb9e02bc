"""Experiment harness: method variants x seeds, summarised with paired t-tests.

Each trial is sequential and deterministic, so running trials in worker
processes changes wall time only; results are assembled in a fixed order.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import DataConfig, RunConfig
from .data import FederationPartition, MaskSpec, partition
from .federation import train
from .metrics import disentanglement_score, evaluate_result, paired_t_test, projection_for, write_projection_csv

MU_GRID = (0.001, 0.01, 0.1, 1.0)
SIX_CLIENT_MASKS = ("uniform_1d:5", "random_2d:3", "cartesian_1d:4", "uniform_1d:3", "random_2d:6", "radial_2d:4")


@dataclass(frozen=True)
class Variant:
    """One row of a study table: an engine plus config overrides."""

    name: str
    method: str
    changes: tuple[tuple[str, Any], ...] = ()
    data_changes: tuple[tuple[str, Any], ...] = ()


@dataclass(frozen=True)
class StudySpec:
    variants: tuple[Variant, ...]
    reference: str
    # variants compared against a reference other than the study-wide one
    references: tuple[tuple[str, str], ...] = ()

    def reference_for(self, name: str) -> str:
        return dict(self.references).get(name, self.reference)


def _mu_sweep() -> StudySpec:
    variants, refs = [], []
    for i in (1, 2, 3):
        for value in MU_GRID:
            mus = {"mu1": 1.0, "mu2": 1.0, "mu3": 1.0, f"mu{i}": value}
            name = f"mu{i}={value:g}"
            variants.append(Variant(name, "fedcrfd", tuple(sorted(mus.items()))))
            refs.append((name, f"mu{i}=0.01"))
    return StudySpec(tuple(variants), "mu1=0.01", tuple(refs))


def _beta_sweep() -> StudySpec:
    variants, refs = [], []
    for beta in (0.10, 0.02):
        for method in ("solo", "fedavg", "fedcrfd"):
            name = f"{method}@beta={beta:g}"
            variants.append(Variant(name, method, (), (("beta", beta),)))
            refs.append((name, f"fedcrfd@beta={beta:g}"))
    return StudySpec(tuple(variants), "fedcrfd@beta=0.1", tuple(refs))


def _client_scale() -> StudySpec:
    data = (("modalities", (0, 1, 2, 0, 1, 2)), ("masks", SIX_CLIENT_MASKS))
    return StudySpec(
        tuple(Variant(m, m, (), data) for m in ("solo", "fedavg", "fedcrfd")),
        "fedcrfd",
    )


STUDIES: dict[str, StudySpec] = {
    "baselines": StudySpec(
        tuple(Variant(m, m) for m in ("solo", "fedavg", "fedcrfd", "centralized")),
        "fedcrfd",
    ),
    "ablation": StudySpec(
        (
            Variant("fedavg", "fedavg"),
            Variant("w/o cross-client", "fedcrfd", (("enable_cross", False),)),
            Variant("w/o feature addition", "fedcrfd", (("use_fusion", False),)),
            Variant("full", "fedcrfd"),
        ),
        "full",
    ),
    "beta_sweep": _beta_sweep(),
    "measure_sweep": StudySpec(
        tuple(Variant(m, "fedcrfd", (("measure", m),)) for m in ("l1", "l2", "cosine")),
        "l1",
    ),
    "mu_sweep": _mu_sweep(),
    "client_scale": _client_scale(),
}


# ---------------------------------------------------------------------------
# trials


def build_partition(dc: DataConfig) -> FederationPartition:
    return _cached_partition(
        dc.size, dc.train_patients, dc.test_patients, dc.slices, dc.beta, dc.center_fraction,
        tuple(dc.modalities), tuple(dc.masks), dc.seed,
    )


@functools.lru_cache(maxsize=4)
def _cached_partition(size, n_train, n_test, slices, beta, cf, modalities, masks, seed) -> FederationPartition:
    return partition(
        range(n_train), len(modalities), beta, list(modalities), [MaskSpec.parse(m) for m in masks], seed,
        size=size, num_slices=slices, center_fraction=cf, test_patients=range(n_train, n_train + n_test),
    )


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "=.-" else "_" for ch in name)


@dataclass
class TrialRecord:
    variant: str
    method: str
    seed: int
    psnr: float
    ssim: float
    per_client_psnr: dict[int, float]
    log: list[dict] = field(repr=False, default_factory=list)
    gaps: tuple[float, float] | None = None

    def round_mean(self, key: str, round_index: int) -> float | None:
        vals = [r[key] for r in self.log if r["round"] == round_index and r[key] is not None]
        return float(np.mean(vals)) if vals else None


def run_trial(variant: Variant, rc: RunConfig, seed: int, out_dir: str | os.PathLike | None = None) -> TrialRecord:
    dc = dataclasses.replace(rc.data, **dict(variant.data_changes))
    dc = dataclasses.replace(dc, modalities=list(dc.modalities), masks=list(dc.masks))
    fed = build_partition(dc)
    rc_trial = dataclasses.replace(rc, data=dc)
    cfg = rc_trial.federation_for(seed, **dict(variant.changes))
    result = train(variant.method, cfg, fed)
    report = evaluate_result(result, fed)
    gaps = disentanglement_score(result, fed) if variant.method == "fedcrfd" and fed.clients[0].vertical else None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{_slug(variant.name)}_{seed}.jsonl", "w") as fh:
            for rec in result.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if variant.method == "fedcrfd":
            write_projection_csv(projection_for(result, fed), out / f"latent_{_slug(variant.name)}_{seed}.csv")
    return TrialRecord(
        variant.name, variant.method, seed, report.psnr, report.ssim,
        {k: s.psnr_mean for k, s in report.per_client.items()}, result.log, gaps,
    )


def _trial_job(args) -> TrialRecord:
    return run_trial(*args)


def worker_cap(requested: int) -> int:
    env = os.environ.get("FEDCRFD_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else requested
    return max(1, min(requested, cap))


def run_trials(
    variants: Sequence[Variant],
    rc: RunConfig,
    seeds: Sequence[int],
    out_dir: str | os.PathLike | None = None,
    parallel: int = 1,
) -> list[TrialRecord]:
    jobs = [(v, rc, s, out_dir) for v in variants for s in seeds]
    workers = worker_cap(parallel)
    if workers == 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_job, jobs))


# ---------------------------------------------------------------------------
# summaries


SUMMARY_FIELDS = ("method", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "p_value")


def summarise(spec: StudySpec, records: Sequence[TrialRecord]) -> list[dict]:
    by_name: dict[str, list[TrialRecord]] = {}
    for r in records:
        by_name.setdefault(r.variant, []).append(r)
    rows = []
    for v in spec.variants:
        recs = sorted(by_name.get(v.name, []), key=lambda r: r.seed)
        if not recs:
            continue
        ps = np.array([r.psnr for r in recs])
        ss = np.array([r.ssim for r in recs])
        ddof = 1 if len(recs) > 1 else 0
        ref = sorted(by_name.get(spec.reference_for(v.name), []), key=lambda r: r.seed)
        p_value = ""
        if v.name != spec.reference_for(v.name) and len(ref) == len(recs) >= 2:
            p_value = paired_t_test([r.psnr for r in ref], ps).p
        rows.append(
            {
                "method": v.name,
                "psnr_mean": float(ps.mean()),
                "psnr_std": float(ps.std(ddof=ddof)),
                "ssim_mean": float(ss.mean()),
                "ssim_std": float(ss.std(ddof=ddof)),
                "p_value": p_value,
            }
        )
    return rows


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_summary(rows: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in SUMMARY_FIELDS])


def write_mu_curves(rows: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu", "value", "psnr_mean", "psnr_std"])
        for r in rows:
            mu, _, value = r["method"].partition("=")
            w.writerow([mu, value, _fmt(r["psnr_mean"]), _fmt(r["psnr_std"])])


def run_study(
    study: str,
    rc: RunConfig,
    out_root: str | os.PathLike,
    seeds: Sequence[int] | None = None,
    parallel: int = 1,
) -> list[dict]:
    """Run every variant of ``study`` over the seeds; write results/<study>/."""
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    spec = STUDIES[study]
    seeds = list(rc.run.seeds if seeds is None else seeds)
    out = Path(out_root) / study
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()
    records: list[TrialRecord] = []
    try:
        if worker_cap(parallel) == 1:
            # one at a time so partial results survive a failure
            for v in spec.variants:
                for s in seeds:
                    records.append(run_trial(v, rc, s, out))
        else:
            records = run_trials(spec.variants, rc, seeds, out, parallel)
    except BaseException:
        failed.write_text(traceback.format_exc())
        if records:
            write_summary(summarise(spec, records), out / "summary.csv")
        raise
    rows = summarise(spec, records)
    write_summary(rows, out / "summary.csv")
    if study == "mu_sweep":
        write_mu_curves(rows, out / "mu_curves.csv")
    return rows
