"""Command-line entry point: ``acnn <command> ...``.

Commands: featurize, synth, train, run, analyze-attention, inspect-checkpoint.
Every command writes its fully resolved configuration to
``<out>/resolved_config.json`` before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import attention as att
from . import corpus
from . import experiments as ex
from . import model as acnn
from .errors import AcnnError, PlanInvalid, ShapeMismatch
from .frontend import FrontendConfig, load_features, logmel, read_wav, save_features

log = logging.getLogger("acnn")

HP_FIELDS = {f.name: f for f in dataclasses.fields(acnn.HyperParams)}
FE_FIELDS = {f.name: f for f in dataclasses.fields(FrontendConfig)}
_FIELD_TYPES = {"int": int, "float": float, "int | None": int}


class UsageError(Exception):
    pass


# --- configuration -------------------------------------------------------------


def _add_field_flags(group, fields):
    for name, f in fields.items():
        if name == "seed":  # covered by the common --seed flag
            continue
        kind = _FIELD_TYPES.get(str(f.type), float)
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        group.add_argument(*flags, dest=f"set_{name}", type=kind, default=None, metavar=name.upper())


def _add_common(p, hp=True, frontend=True):
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: logical cores)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)
    if hp:
        p.add_argument("--preset", choices=sorted(acnn.PRESETS), default=None)
        _add_field_flags(p.add_argument_group("hyperparameters"), HP_FIELDS)
    if frontend:
        _add_field_flags(p.add_argument_group("frontend"), FE_FIELDS)


def resolve_config(args, plan_layer: dict | None = None) -> dict:
    """Merge defaults < config file < plan file (``run`` only) < flags."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
    plan_layer = plan_layer or {}
    cfg = {
        "command": args.command,
        "seed": file_cfg.get("seed", 0),
        "jobs": file_cfg.get("jobs", os.cpu_count() or 1),
        "preset": plan_layer.get("preset") or file_cfg.get("preset", "paper-default"),
        "hp": {**file_cfg.get("hp", {}), **plan_layer.get("hp", {})},
        "frontend": dict(file_cfg.get("frontend", {})),
        "verbosity": file_cfg.get("verbosity", 0),
    }
    for key in ("seed", "jobs", "preset"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    if getattr(args, "verbose", 0):
        cfg["verbosity"] = args.verbose
    for name in HP_FIELDS:
        v = getattr(args, f"set_{name}", None)
        if v is not None:
            cfg["hp"][name] = v
    for name in FE_FIELDS:
        v = getattr(args, f"set_{name}", None)
        if v is not None:
            cfg["frontend"][name] = v
    unknown = set(cfg["hp"]) - set(HP_FIELDS)
    if unknown:
        raise UsageError(f"unknown hyperparameters {sorted(unknown)}")
    unknown = set(cfg["frontend"]) - set(FE_FIELDS)
    if unknown:
        raise UsageError(f"unknown frontend settings {sorted(unknown)}")
    if getattr(args, "seed", None) is not None:
        cfg["hp"]["seed"] = args.seed
    cfg["hp"].setdefault("seed", cfg["seed"])
    hp = acnn.preset(cfg["preset"], **cfg["hp"])
    fe = FrontendConfig(**cfg["frontend"])
    cfg["hp"] = dataclasses.asdict(hp)
    cfg["frontend"] = dataclasses.asdict(fe)
    cfg["out"] = str(args.out)
    return cfg


def _write_if_changed(path: Path, text: str) -> bool:
    if path.exists() and path.read_text() == text:
        return False
    path.write_text(text)
    return True


def echo_config(out: Path, cfg: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {**cfg, **(extra or {})}
    _write_if_changed(out / "resolved_config.json", json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")


def _hp(cfg):
    return acnn.HyperParams(**cfg["hp"])


def _fe(cfg):
    return FrontendConfig(**cfg["frontend"])


# --- feature helpers -------------------------------------------------------------


def _featurize_one(job):
    rec_id, wav, cache, fe = job
    try:
        fm = logmel(read_wav(wav), fe)
        save_features(cache, fm)
        return rec_id, fm.n_frames_valid, None
    except FileNotFoundError:
        return rec_id, None, f"{rec_id}: audio file not found: {wav}"
    except Exception as exc:  # reported per file, never fatal for the batch
        return rec_id, None, f"{rec_id}: {type(exc).__name__}: {exc}"


def read_index(feature_dir: Path) -> dict:
    index = {}
    path = feature_dir / "index.csv"
    if not path.exists():
        return index
    for line in path.read_text().splitlines()[1:]:
        rec_id, rel, n_valid = line.split(",")
        index[rec_id] = feature_dir / rel
    return index


def load_corpus_features(records, feature_dir: Path | None, fe: FrontendConfig) -> dict:
    if feature_dir is None:
        return corpus.featurize_records(records, fe)
    index = read_index(feature_dir)
    missing = [r.id for r in records if r.id not in index]
    if missing:
        raise ex.MissingFeatures(f"{feature_dir}: no cached features for {missing[:5]}")
    return {r.id: load_features(index[r.id]) for r in records}


# --- commands --------------------------------------------------------------------


def cmd_featurize(args) -> int:
    cfg = resolve_config(args)
    out: Path = args.out
    fe = _fe(cfg)
    echo_config(out, cfg, {"manifest": str(args.manifest)})
    records = corpus.load_manifest(args.manifest)
    cache_dir = out / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    fe_text = json.dumps(cfg["frontend"], sort_keys=True)
    fe_stamp = out / "frontend.json"
    fresh_config = fe_stamp.exists() and fe_stamp.read_text() == fe_text
    previous = read_index(out)

    todo, done, errors = [], {}, []
    for r in records:
        cache = cache_dir / f"{r.id}.acnf"
        wav = r.audio_file
        up_to_date = (
            fresh_config and r.id in previous and cache.exists() and wav.exists()
            and cache.stat().st_mtime >= wav.stat().st_mtime
        )
        if up_to_date:
            done[r.id] = load_features(cache).n_frames_valid
        else:
            todo.append((r.id, wav, cache, fe))
    jobs = max(1, int(cfg["jobs"]))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_featurize_one, todo, chunksize=8))
    else:
        results = [_featurize_one(j) for j in todo]
    for rec_id, n_valid, err in results:
        if err:
            errors.append(err)
        else:
            done[rec_id] = n_valid
    lines = ["id,cache_path,n_frames_valid"]
    lines += [f"{r.id},cache/{r.id}.acnf,{done[r.id]}" for r in records if r.id in done]
    _write_if_changed(out / "index.csv", "\n".join(lines) + "\n")
    _write_if_changed(fe_stamp, fe_text)
    log.info("featurized %d, reused %d, failed %d", len(todo) - len(errors), len(done) - (len(todo) - len(errors)), len(errors))
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return 1 if errors else 0


def cmd_synth(args) -> int:
    spec_dict = json.loads(Path(args.spec).read_text())
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    try:
        spec = corpus.SyntheticSpec.from_dict(spec_dict)
    except (TypeError, ValueError) as exc:
        print(f"invalid synthetic spec: {exc}", file=sys.stderr)
        return 2
    echo_config(args.out, {"command": "synth", "out": str(args.out), "spec": dataclasses.asdict(spec)})
    records = corpus.generate_synthetic(spec, args.out)
    print(f"wrote {len(records)} utterances to {args.out}")
    return 0


def _corpus_from_entry(name, entry, base: Path, fe) -> ex.Corpus:
    if "manifest" not in entry:
        raise UsageError(f"corpus {name}: entry needs a 'manifest' or a 'synthetic' spec")
    manifest = base / entry["manifest"]
    records = corpus.load_manifest(manifest, entry.get("labels", "recola"))
    feats = entry.get("features")
    features = load_corpus_features(records, base / feats if feats else None, fe)
    return ex.Corpus(name, records, features, entry.get("labels", "recola"), entry.get("folds", "speaker"))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    hp, fe = _hp(cfg), _fe(cfg)
    echo_config(args.out, cfg, {"manifest": str(args.manifest), "dimension": args.dimension,
                                "labels": args.labels, "fold": args.fold})
    entry = {"manifest": str(Path(args.manifest).resolve()), "labels": args.labels, "folds": args.folds}
    if args.features:
        entry["features"] = str(Path(args.features).resolve())
    c = _corpus_from_entry(args.corpus_name, entry, Path("/"), fe)
    if args.fold is None:
        train, dev = c.dataset(args.dimension), None
    else:
        fold = c.folds()[args.fold]
        train = c.dataset(args.dimension, c.split(fold, "train"))
        dev = c.dataset(args.dimension, c.split(fold, "dev"))
    rng = np.random.default_rng(hp.seed)
    params = acnn.init_params(hp, train.X.shape[2], rng)
    params, history = acnn.fit(train, dev, params, hp, rng)
    selected = next((h["epoch"] for h in history if h["selected"]), 0)
    ckpt = args.out / "model.acnp"
    acnn.save_model(ckpt, params, hp, train.X.shape[2], {
        "dimension": args.dimension, "corpora": c.name, "seed": hp.seed,
        "epoch_selected": selected, "fold": "all" if args.fold is None else args.fold,
        "fold_scheme": args.folds,
    })
    (args.out / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    cm = acnn.evaluate(params, hp, train)
    print(f"trained {hp.epochs} epochs, selected epoch {selected}, "
          f"training accuracy {np.trace(cm) / cm.sum():.3f}; checkpoint {ckpt}")
    return 0


def load_plan_file(path: Path):
    """Returns (corpus entries, list of ExperimentPlan, plan names, file-level hp overrides)."""
    doc = json.loads(Path(path).read_text())
    raw_plans = doc.get("plans")
    if raw_plans is None:
        raw_plans = [{k: v for k, v in doc.items() if k not in ("corpora", "hp", "preset", "name")}]
        if "name" in doc:
            raw_plans[0]["name"] = doc["name"]
    plans, names = [], []
    for i, p in enumerate(raw_plans):
        p = dict(p)
        name = p.pop("name", None)
        plan = ex.ExperimentPlan.from_dict(p)
        plan.validate()
        plans.append(plan)
        names.append(name or f"{i:02d}_{plan.protocol}_{plan.dimension}")
    return doc.get("corpora", {}), plans, names, doc.get("hp", {}), doc.get("preset")


BUNDLED = Path(__file__).parent / "data"


def _plan_path(arg: Path) -> Path:
    """A plan file path, or the name of a plan bundled with the package."""
    if arg.exists():
        return arg
    bundled = BUNDLED / f"{arg}_plan.json"
    if bundled.exists():
        return bundled
    raise UsageError(f"plan file {arg} not found (bundled plans: {bundled_plans()})")


def bundled_plans() -> list:
    return sorted(p.name[: -len("_plan.json")] for p in BUNDLED.glob("*_plan.json"))


def _materialize_synthetic(entries: dict, out: Path) -> dict:
    """Generate corpora given inline as ``{"synthetic": {...}}`` under ``out/corpora``."""
    resolved = {}
    for name, entry in entries.items():
        if "synthetic" in entry:
            spec = corpus.SyntheticSpec.from_dict(entry["synthetic"])
            target = (out / "corpora" / name).resolve()
            corpus.generate_synthetic(spec, target)
            entry = {k: v for k, v in entry.items() if k != "synthetic"}
            entry["manifest"] = str(target / "manifest.csv")
        resolved[name] = entry
    return resolved


def cmd_run(args) -> int:
    args.plan = _plan_path(args.plan)
    try:
        entries, plans, names, plan_hp, plan_preset = load_plan_file(args.plan)
    except PlanInvalid as exc:
        raise UsageError(str(exc)) from exc
    cfg = resolve_config(args, {"hp": plan_hp, "preset": plan_preset})
    hp = _hp(cfg)
    if args.seed is not None:
        for p in plans:
            p.seed = args.seed
    out: Path = args.out
    echo_config(out, cfg, {"plan": str(args.plan), "plans": [dataclasses.asdict(p) for p in plans]})
    base = Path(args.plan).resolve().parent
    fe = _fe(cfg)
    entries = _materialize_synthetic(entries, out)
    corpora = {name: _corpus_from_entry(name, e, base, fe) for name, e in entries.items()}
    reports, failed = [], False
    rows = ["protocol,corpus,dimension,fold,repetition,uar"]
    for plan, name in zip(plans, names):
        ckpt_dir = out / "checkpoints" / name if args.save_checkpoints else None
        try:
            report = ex.run_plan(plan, corpora, hp, jobs=max(1, int(cfg["jobs"])), on_error="record",
                                 checkpoint_dir=ckpt_dir)
        except PlanInvalid as exc:
            raise UsageError(f"plan {name}: {exc}") from exc
        (out / f"{name}.json").write_text(ex.report_json(report))
        rows += ex.report_csv(report).splitlines()[1:]
        reports.append(report)
        if report["status"] != "OK":
            failed = True
            for f in report["failures"]:
                print(f"FAILED plan {name} rep {f['repetition']} fold {f['fold']}: {f['error']}", file=sys.stderr)
    (out / "results.csv").write_text("\n".join(rows) + "\n")
    print(ex.format_table(reports))
    return 1 if failed else 0


def _select_split(c: ex.Corpus, meta: dict, args):
    split = args.split
    fold = meta.get("fold")
    if split == "auto":
        split = "train" if fold not in (None, "all") else "all"
    if split == "all":
        return c.records, "all"
    if fold in (None, "all"):
        raise UsageError(f"--split {split} needs a checkpoint trained on a fold")
    return c.split(c.folds()[int(fold)], split), split


def cmd_analyze_attention(args) -> int:
    cfg = resolve_config(args)
    fe = _fe(cfg)
    echo_config(args.out, {**cfg, "checkpoints": [str(c) for c in args.checkpoint],
                           "manifest": str(args.manifest), "split": args.split})
    entry = {"manifest": str(Path(args.manifest).resolve()), "labels": args.labels, "folds": args.folds}
    if args.features:
        entry["features"] = str(Path(args.features).resolve())
    c = _corpus_from_entry("data", entry, Path("/"), fe)
    runs, summaries = {}, []
    for ckpt in args.checkpoint:
        params, hp, input_T, meta = acnn.load_model(ckpt)
        records, split = _select_split(c, meta, args)
        for r in records:
            shape = c.features[r.id].values.shape
            if shape != (hp.n_features, input_T):
                raise ShapeMismatch(
                    f"{r.id}: features {shape} but checkpoint {ckpt} expects ({hp.n_features}, {input_T})"
                )
        recs = att.extract_attention(params, hp, c.features, [r.id for r in records])
        label = Path(ckpt).stem
        runs[label] = recs
        if len(args.checkpoint) == 1:
            (args.out / "attention_records.csv").write_text(att.records_csv(recs))
        else:
            (args.out / f"attention_records_{label}.csv").write_text(att.records_csv(recs))
        s = att.summarize(recs, args.threshold, label=f"{label} ({split})")
        summaries.append(s)
        print(att.format_summary(s))
        cues = {r.id: r.cue_position for r in records}
        if any(v is not None for v in cues.values()):
            score = att.localization_score(recs, cues, att.segment_map(hp, input_T, fe))
            print(f"  localization score {score:.3f} (uniform baseline {1 / len(recs[0].alpha):.3f})")
    pooled = att.summarize([r for recs in runs.values() for r in recs], args.threshold, label="pooled")
    lines = ["position,fraction"] + [f"{i},{float(v)!r}" for i, v in enumerate(pooled.histogram)]
    (args.out / "attention_summary.csv").write_text("\n".join(lines) + "\n")
    if len(runs) > 1:
        (args.out / "attention_summary_runs.csv").write_text(att.summary_csv(summaries + [pooled]))
        print(att.format_summary(pooled))
    return 0


def cmd_inspect_checkpoint(args) -> int:
    params, hp, input_T, meta = acnn.load_model(args.checkpoint)
    print(f"checkpoint {args.checkpoint}")
    print(f"input frames {input_T}, conv steps {hp.conv_length(input_T)}, "
          f"attention steps {hp.pooled_steps(input_T)}, dense input {hp.dense_dim(input_T)}")
    for k, v in dataclasses.asdict(hp).items():
        print(f"  hp.{k} = {v}")
    for name, arr in params.items():
        print(f"  {name}: {tuple(arr.shape)}  |max| {np.abs(arr).max():.4g}")
    for k, v in meta.items():
        print(f"  meta.{k} = {v}")
    return 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="compute logMel feature caches for a manifest")
    p.add_argument("manifest", type=Path)
    _add_common(p, hp=False)

    p = sub.add_parser("synth", help="generate a synthetic corpus from a JSON spec")
    p.add_argument("spec", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("train", help="train one model on a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--dimension", choices=corpus.DIMENSIONS, default="arousal")
    p.add_argument("--labels", choices=sorted(corpus.MAPPINGS), default="recola")
    p.add_argument("--folds", choices=sorted(ex.FOLD_SCHEMES), default="speaker")
    p.add_argument("--fold", type=int, default=None, help="train on this fold's train split, select on its dev split")
    p.add_argument("--features", type=Path, default=None, help="feature cache directory from `featurize`")
    p.add_argument("--corpus-name", default="corpus")
    _add_common(p)

    p = sub.add_parser("run", help="execute an experiment plan file")
    p.add_argument("plan", type=Path, help="plan JSON file, or the name of a bundled plan (e.g. smoke)")
    p.add_argument("--save-checkpoints", action="store_true")
    _add_common(p)

    p = sub.add_parser("analyze-attention", help="attention argmax/dominance statistics")
    p.add_argument("--checkpoint", type=Path, action="append", required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--features", type=Path, default=None)
    p.add_argument("--labels", choices=sorted(corpus.MAPPINGS), default="recola")
    p.add_argument("--folds", choices=sorted(ex.FOLD_SCHEMES), default="speaker")
    p.add_argument("--split", choices=("auto", "all", "train", "dev", "test"), default="auto")
    p.add_argument("--threshold", type=float, default=0.5)
    _add_common(p, hp=False)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's shapes and metadata")
    p.add_argument("checkpoint", type=Path)
    return parser


COMMANDS = {
    "featurize": cmd_featurize,
    "synth": cmd_synth,
    "train": cmd_train,
    "run": cmd_run,
    "analyze-attention": cmd_analyze_attention,
    "inspect-checkpoint": cmd_inspect_checkpoint,
}


def _setup_logging(verbosity: int) -> None:
    level = os.environ.get("ACNN_LOG", "").upper()
    if not level:
        level = "DEBUG" if verbosity >= 2 else "INFO" if verbosity == 1 else "WARNING"
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(getattr(args, "verbose", 0))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"acnn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AcnnError, OSError, ValueError) as exc:
        print(f"acnn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
