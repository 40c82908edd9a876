"""Mono-lingual, multilingual, cross-lingual and fine-tuning protocols.

Every (repetition, fold) cell draws its seeds from
``SeedSequence([master_seed, repetition, fold, ...])`` so any cell can be
re-run on its own.  Reports are plain dicts that serialize to stable JSON.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as acnn
from .corpus import DIMENSIONS, LabelMapping, get_mapping
from .errors import (
    BadSessionStructure,
    InsufficientSpeakers,
    MissingFeatures,
    PlanInvalid,
    PoolTooSmall,
)
from .metrics import confusion_matrix, recalls, uar

log = logging.getLogger(__name__)

PROTOCOLS = ("mono", "multi", "cross", "cross_ft")
N_FOLDS = 5
CROSS_KEY = 10_000  # fold slot reserved for the cross-lingual source model
FT_KEY = 1

__all__ = [
    "PROTOCOLS", "Corpus", "FoldSpec", "ExperimentPlan", "uar", "recalls", "confusion_matrix",
    "make_iemocap_folds", "make_recola_folds", "make_folds", "select_ft_samples", "run_plan",
    "derive_seed", "report_json", "report_csv", "format_table",
]


@dataclass(frozen=True)
class FoldSpec:
    fold_id: int
    train: tuple  # speaker ids
    dev: tuple
    test: tuple

    def __post_init__(self):
        tr, dv, te = set(self.train), set(self.dev), set(self.test)
        if tr & dv or tr & te or dv & te:
            raise ValueError(f"fold {self.fold_id}: a speaker appears in two roles")

    def role_of(self, speaker):
        for role in ("train", "dev", "test"):
            if speaker in getattr(self, role):
                return role
        return None


def _speakers_by(records, key):
    groups = {}
    for r in records:
        groups.setdefault(getattr(r, key), set()).add(r.speaker)
    return groups


def make_iemocap_folds(records) -> list:
    """Leave-one-session-out folds; the next session (cyclically) is dev."""
    sessions = _speakers_by(records, "session")
    if len(sessions) != N_FOLDS:
        raise BadSessionStructure(f"expected {N_FOLDS} sessions, found {len(sessions)}")
    names = sorted(sessions)
    owner = {}
    for s in names:
        if len(sessions[s]) != 2:
            raise BadSessionStructure(f"session {s} has {len(sessions[s])} speakers, expected 2")
        for spk in sessions[s]:
            if owner.setdefault(spk, s) != s:
                raise BadSessionStructure(f"speaker {spk} appears in sessions {owner[spk]} and {s}")
    folds = []
    for i, test in enumerate(names):
        dev = names[(i + 1) % N_FOLDS]
        train = [s for s in names if s not in (test, dev)]
        folds.append(
            FoldSpec(
                i,
                tuple(sorted(spk for s in train for spk in sessions[s])),
                tuple(sorted(sessions[dev])),
                tuple(sorted(sessions[test])),
            )
        )
    return folds


def speaker_splits(records, n_splits: int = N_FOLDS) -> list:
    """Deal speakers into splits balanced by count and by sex."""
    sex_of = {}
    for r in records:
        sex_of.setdefault(r.speaker, r.sex)
    if len(sex_of) < n_splits:
        raise InsufficientSpeakers(f"{len(sex_of)} speakers cannot fill {n_splits} splits")
    ordered = sorted(sex_of, key=lambda s: (sex_of[s], s))
    splits = [[] for _ in range(n_splits)]
    for k, spk in enumerate(ordered):
        splits[k % n_splits].append(spk)
    return splits


def make_recola_folds(records) -> list:
    """Five speaker-disjoint splits; split i tests, split i+1 is dev."""
    splits = speaker_splits(records)
    folds = []
    for i in range(N_FOLDS):
        dev = (i + 1) % N_FOLDS
        train = [s for j, sp in enumerate(splits) if j not in (i, dev) for s in sp]
        folds.append(FoldSpec(i, tuple(sorted(train)), tuple(sorted(splits[dev])), tuple(sorted(splits[i]))))
    return folds


FOLD_SCHEMES = {"session": make_iemocap_folds, "speaker": make_recola_folds}


def make_folds(records, scheme: str) -> list:
    try:
        return FOLD_SCHEMES[scheme](records)
    except KeyError:
        raise PlanInvalid(f"unknown fold scheme {scheme!r}; choose from {sorted(FOLD_SCHEMES)}") from None


@dataclass
class Corpus:
    """Records plus features and the label scheme they are mapped with."""

    name: str
    records: list
    features: dict  # id -> FeatureMatrix or (R, T) array
    mapping: LabelMapping
    fold_scheme: str = "speaker"

    def __post_init__(self):
        self.mapping = get_mapping(self.mapping)

    def dataset(self, dimension: str, records=None) -> acnn.Dataset:
        records = self.records if records is None else records
        missing = [r.id for r in records if r.id not in self.features]
        if missing:
            raise MissingFeatures(f"{self.name}: no features for {missing[:5]}")
        if not records:
            return acnn.Dataset(np.zeros((0, 0, 0)), np.zeros(0, dtype=int), [])
        X = np.stack([np.asarray(getattr(self.features[r.id], "values", self.features[r.id])) for r in records])
        y = [r.label(dimension, self.mapping) for r in records]
        return acnn.Dataset(X, y, [r.id for r in records])

    def split(self, fold: FoldSpec, role: str) -> list:
        speakers = set(getattr(fold, role))
        return [r for r in self.records if r.speaker in speakers]

    def folds(self) -> list:
        return make_folds(self.records, self.fold_scheme)


@dataclass
class ExperimentPlan:
    protocol: str
    sources: list
    dimension: str = "arousal"
    target: str | None = None
    repetitions: int = 5
    ft_samples_per_fold: int = 100
    seed: int = 0
    folds: dict = field(default_factory=dict)  # optional corpus name -> [FoldSpec]

    def validate(self, corpora: dict | None = None) -> None:
        if self.protocol not in PROTOCOLS:
            raise PlanInvalid(f"unknown protocol {self.protocol!r}; choose from {list(PROTOCOLS)}")
        if self.dimension not in DIMENSIONS:
            raise PlanInvalid(f"dimension must be one of {DIMENSIONS}")
        if self.repetitions < 1:
            raise PlanInvalid("repetitions must be >= 1")
        if not self.sources:
            raise PlanInvalid("no source corpus")
        if self.protocol == "multi":
            if len(self.sources) < 2:
                raise PlanInvalid("multi needs at least two source corpora")
        elif len(self.sources) != 1:
            raise PlanInvalid(f"{self.protocol} takes exactly one source corpus")
        if corpora is not None:
            needed = list(self.sources) + ([self.target] if self.target else [])
            absent = [n for n in needed if n not in corpora]
            if absent:
                raise PlanInvalid(f"corpora {absent} not supplied")
        if self.protocol in ("cross", "cross_ft"):
            if self.target is None:
                raise PlanInvalid(f"{self.protocol} needs a target corpus")
            if self.target == self.sources[0]:
                raise PlanInvalid("source and target corpus are the same")
            if corpora is not None:
                src, tgt = corpora[self.sources[0]], corpora[self.target]
                if {r.id for r in src.records} == {r.id for r in tgt.records}:
                    raise PlanInvalid("source and target corpus contain identical utterances")
        if self.protocol == "cross_ft" and self.ft_samples_per_fold < 1:
            raise PlanInvalid("ft_samples_per_fold must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = {f.name for f in dataclasses.fields(cls)} - {"folds"}
        unknown = set(d) - known
        if unknown:
            raise PlanInvalid(f"unknown plan fields {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("sources"), str):
            d["sources"] = [d["sources"]]
        return cls(**d)


def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


def select_ft_samples(pool, n: int, rng) -> list:
    """Uniform draw of ``n`` items without replacement, order preserved."""
    if len(pool) < n:
        raise PoolTooSmall(f"pool has {len(pool)} samples, {n} requested")
    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    return [pool[i] for i in idx]


# --- jobs -----------------------------------------------------------------------


def _hp_for(hp, seed):
    return hp.replace(seed=seed)


def _train(train, dev, hp, seed):
    hp = _hp_for(hp, seed)
    rng = np.random.default_rng(seed)
    params = acnn.init_params(hp, train.X.shape[2], rng)
    return acnn.fit(train, dev, params, hp, rng)


def _cell(corpus_name, rep, fold, cm, **extra):
    cm = np.asarray(cm)
    return {"corpus": corpus_name, "repetition": rep, "fold": fold,
            "confusion": cm.tolist(), "uar": uar(cm), **extra}


def _selected_epoch(history):
    return next((h["epoch"] for h in history if h["selected"]), 0)


def _job_fold(spec):
    """mono / multi: fit on merged training splits, test per corpus."""
    train, dev, tests, hp, seed, rep, fold, ckpt = spec
    params, history = _train(train, dev, hp, seed)
    if ckpt is not None:
        acnn.save_model(ckpt["path"], params, hp.replace(seed=seed), train.X.shape[2],
                        {**ckpt["meta"], "seed": seed, "epoch_selected": _selected_epoch(history)})
    return [
        _cell(name, rep, fold, acnn.evaluate(params, hp, test), seed=seed,
              epoch_selected=_selected_epoch(history))
        for name, test in tests
    ]


def _job_cross(spec):
    """cross / cross_ft: train on the whole source, no dev selection."""
    src, target_all, ft_cells, hp, seed, rep, target_name, ckpt = spec
    params, _ = _train(src, None, hp, seed)
    if ckpt is not None:
        acnn.save_model(ckpt["path"], params, hp.replace(seed=seed), src.X.shape[2],
                        {**ckpt["meta"], "seed": seed, "epoch_selected": hp.epochs})
    if ft_cells is None:
        return [_cell(target_name, rep, "all", acnn.evaluate(params, hp, target_all), seed=seed)]
    rows = []
    for fold, pool, test, ft_seed, n in ft_cells:
        rng = np.random.default_rng(ft_seed)
        chosen = select_ft_samples(list(range(len(pool))), n, rng)
        tuned = acnn.fine_tune(params, pool.subset(chosen), _hp_for(hp, ft_seed), rng)
        rows.append(_cell(target_name, rep, fold, acnn.evaluate(tuned, hp, test),
                          seed=seed, ft_seed=ft_seed, ft_ids=[pool.ids[i] for i in chosen]))
    return rows


def _build_jobs(plan: ExperimentPlan, corpora: dict, hp, checkpoint_dir=None):
    dim = plan.dimension
    jobs = []

    def ckpt(name, meta):
        if checkpoint_dir is None:
            return None
        return {"path": str(checkpoint_dir / f"{name}.acnp"),
                "meta": {"dimension": dim, "protocol": plan.protocol, **meta}}

    if plan.protocol in ("mono", "multi"):
        active = [corpora[n] for n in plan.sources if corpora[n].records]
        if not active:
            raise PlanInvalid("all source corpora are empty")
        folds = {c.name: plan.folds.get(c.name) or c.folds() for c in active}
        for rep in range(plan.repetitions):
            for f in range(N_FOLDS):
                parts = {c.name: folds[c.name][f] for c in active}
                train = acnn.Dataset.concat([c.dataset(dim, c.split(parts[c.name], "train")) for c in active])
                devs = [c.dataset(dim, c.split(parts[c.name], "dev")) for c in active]
                dev = acnn.Dataset.concat(devs) if any(len(d) for d in devs) else None
                tests = [(c.name, c.dataset(dim, c.split(parts[c.name], "test"))) for c in active]
                seed = derive_seed(plan.seed, rep, f)
                meta = {"corpora": "+".join(c.name for c in active), "repetition": rep, "fold": f}
                jobs.append((_job_fold, (train, dev, tests, hp, seed, rep, f, ckpt(f"model_r{rep}_f{f}", meta))))
        return jobs

    src, tgt = corpora[plan.sources[0]], corpora[plan.target]
    src_all = src.dataset(dim)
    tgt_all = tgt.dataset(dim)
    tgt_folds = None
    if plan.protocol == "cross_ft":
        tgt_folds = plan.folds.get(tgt.name) or tgt.folds()
    for rep in range(plan.repetitions):
        seed = derive_seed(plan.seed, rep, CROSS_KEY)
        ft_cells = None
        if tgt_folds is not None:
            ft_cells = []
            for fold in tgt_folds:
                test_recs = tgt.split(fold, "test")
                pool = tgt.dataset(dim, tgt.split(fold, "train"))
                if {r.speaker for r in test_recs} & {r.speaker for r in tgt.split(fold, "train")}:
                    raise PlanInvalid(f"fold {fold.fold_id}: fine-tuning pool shares speakers with test")
                ft_cells.append((fold.fold_id, pool, tgt.dataset(dim, test_recs),
                                 derive_seed(plan.seed, rep, fold.fold_id, FT_KEY), plan.ft_samples_per_fold))
        meta = {"corpora": src.name, "repetition": rep, "fold": "all"}
        jobs.append((_job_cross, (src_all, tgt_all, ft_cells, hp, seed, rep, tgt.name,
                                  ckpt(f"model_r{rep}_cross", meta))))
    return jobs


def _run_job(job):
    fn, spec = job
    return fn(spec)


def run_plan(plan: ExperimentPlan, corpora: dict, hp, jobs: int = 1, on_error: str = "raise",
             checkpoint_dir=None) -> dict:
    """Execute a plan and return its report dict.

    ``on_error="record"`` keeps going past failing cells and lists them under
    ``failures``; the default re-raises.
    """
    plan.validate(corpora)
    if checkpoint_dir is not None:
        from pathlib import Path

        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    job_list = _build_jobs(plan, corpora, hp, checkpoint_dir)
    results = [None] * len(job_list)
    failures = []
    if jobs > 1 and len(job_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(_run_job, j) for j in job_list]
            for k, fut in enumerate(futures):
                try:
                    results[k] = fut.result()
                except Exception as exc:
                    if on_error == "raise":
                        raise
                    failures.append(_failure(job_list[k], exc))
    else:
        for k, job in enumerate(job_list):
            try:
                results[k] = _run_job(job)
            except Exception as exc:
                if on_error == "raise":
                    raise
                failures.append(_failure(job, exc))
    cells = [c for rows in results if rows for c in rows]
    return build_report(plan, hp, cells, failures)


def _failure(job, exc):
    spec = job[1]
    return {"repetition": spec[5], "fold": spec[6] if job[0] is _job_fold else "all",
            "status": "FAILED", "error": f"{type(exc).__name__}: {exc}"}


def build_report(plan, hp, cells, failures=()) -> dict:
    results = {}
    for name in sorted({c["corpus"] for c in cells}):
        mine = [c for c in cells if c["corpus"] == name]
        reps = sorted({c["repetition"] for c in mine})
        rep_means = [float(np.mean([c["uar"] for c in mine if c["repetition"] == r])) for r in reps]
        results[name] = {
            "folds": mine,
            "repetition_means": rep_means,
            "grand_mean": float(np.mean(rep_means)),
        }
    return {
        "protocol": plan.protocol,
        "dimension": plan.dimension,
        "sources": list(plan.sources),
        "target": plan.target,
        "repetitions": plan.repetitions,
        "ft_samples_per_fold": plan.ft_samples_per_fold,
        "seed": plan.seed,
        "hp": dataclasses.asdict(hp),
        "results": results,
        "failures": list(failures),
        "status": "FAILED" if failures else "OK",
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protocol", "corpus", "dimension", "fold", "repetition", "uar"])
    for name, res in report["results"].items():
        for c in res["folds"]:
            w.writerow([report["protocol"], name, report["dimension"], c["fold"], c["repetition"], repr(c["uar"])])
    for f in report.get("failures", []):
        w.writerow([report["protocol"], "", report["dimension"], f["fold"], f["repetition"], "FAILED"])
    return buf.getvalue()


_ROW_NAMES = {"mono": "mono-lingual", "multi": "multilingual", "cross": "cross-lingual", "cross_ft": "CL + FT"}


def format_table(reports) -> str:
    """UAR table (percent): one row per protocol, one column per corpus x dimension."""
    columns, rows = [], {}
    for rep in reports:
        for name, res in rep["results"].items():
            col = (name, rep["dimension"])
            if col not in columns:
                columns.append(col)
            rows.setdefault(rep["protocol"], {})[col] = 100.0 * res["grand_mean"]
    order = [p for p in PROTOCOLS if p in rows]
    head = ["protocol"] + [f"{c} {d}" for c, d in columns]
    lines = [" | ".join(f"{h:>16}" for h in head)]
    for p in order:
        cells = [f"{rows[p][c]:16.2f}" if c in rows[p] else f"{'-':>16}" for c in columns]
        lines.append(" | ".join([f"{_ROW_NAMES[p]:>16}"] + cells))
    return "\n".join(lines)
