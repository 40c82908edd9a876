"""Corpus manifests, binary label mapping and synthetic corpora.

Manifest format: CSV with header
``id,path,language,speaker,session,sex,arousal_raw,valence_raw,
trace_path_arousal,trace_path_valence``; extra columns (e.g.
``cue_position_s``, ``turn_start``, ``turn_end``) are carried along in
``UtteranceRecord.extra``.  Relative paths resolve against the manifest's
directory.

Trace files hold ``time_s,value`` lines.  A line ``# <name>`` starts a new
annotator block; a file without such lines is a single annotator.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateId,
    EmptyTurn,
    InvalidConfig,
    MissingField,
    OutOfRange,
    ParseError,
)
from .frontend import FrontendConfig, logmel, read_wav, write_wav

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = (
    "id",
    "path",
    "language",
    "speaker",
    "session",
    "sex",
    "arousal_raw",
    "valence_raw",
    "trace_path_arousal",
    "trace_path_valence",
)
DIMENSIONS = ("arousal", "valence")


@dataclass(frozen=True)
class LabelMapping:
    """Binary split of a corpus-native scale: [low, threshold] -> 0, (threshold, high] -> 1."""

    kind: str
    low: float
    high: float
    threshold: float


IEMOCAP = LabelMapping("iemocap", 1.0, 5.0, 2.5)
RECOLA = LabelMapping("recola", -1.0, 1.0, 0.0)
MAPPINGS = {m.kind: m for m in (IEMOCAP, RECOLA)}


def get_mapping(kind) -> LabelMapping:
    if isinstance(kind, LabelMapping):
        return kind
    try:
        return MAPPINGS[kind]
    except KeyError:
        raise ValueError(f"unknown label scheme {kind!r}; choose from {sorted(MAPPINGS)}") from None


def map_label(raw: float, mapping: LabelMapping) -> int:
    raw = float(raw)
    if not (mapping.low <= raw <= mapping.high):
        raise OutOfRange(f"{raw} outside the {mapping.kind} range [{mapping.low}, {mapping.high}]")
    return 0 if raw <= mapping.threshold else 1


def aggregate_trace(traces, turn=(-math.inf, math.inf)) -> float:
    """Mean of each annotator's values inside the turn, then mean over annotators."""
    t_start, t_end = turn
    if not traces:
        raise EmptyTurn("no annotators")
    means = []
    for k, trace in enumerate(traces):
        vals = [float(v) for t, v in trace if t_start <= float(t) <= t_end]
        if not vals:
            raise EmptyTurn(f"annotator {k} has no points in [{t_start}, {t_end}]")
        means.append(math.fsum(vals) / len(vals))
    return math.fsum(means) / len(means)


def read_traces(path) -> list:
    annotators, current = [], None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            current = []
            annotators.append(current)
            continue
        try:
            t, v = (float(x) for x in line.split(","))
        except ValueError:
            raise ParseError(f"{path}: expected 'time_s,value', got {line!r}", lineno) from None
        if current is None:
            current = []
            annotators.append(current)
        current.append((t, v))
    return [a for a in annotators if a]


def write_traces(path, traces) -> None:
    lines = []
    for k, trace in enumerate(traces):
        lines.append(f"# annotator{k}")
        lines.extend(f"{t!r},{v!r}" for t, v in trace)
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class UtteranceRecord:
    id: str
    path: str
    language: str
    speaker: str
    session: str
    sex: str = ""
    arousal_raw: float | None = None
    valence_raw: float | None = None
    trace_path_arousal: str | None = None
    trace_path_valence: str | None = None
    extra: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def audio_file(self) -> Path:
        return self.resolve(self.path)

    def turn(self):
        start = self.extra.get("turn_start") or -math.inf
        end = self.extra.get("turn_end") or math.inf
        return float(start), float(end)

    def raw_label(self, dimension: str) -> float:
        scalar = getattr(self, f"{dimension}_raw")
        if scalar is not None:
            return scalar
        traces = read_traces(self.resolve(getattr(self, f"trace_path_{dimension}")))
        return aggregate_trace(traces, self.turn())

    def label(self, dimension: str, mapping) -> int:
        return map_label(self.raw_label(dimension), get_mapping(mapping))

    @property
    def cue_position(self) -> float | None:
        v = self.extra.get("cue_position_s")
        return float(v) if v not in (None, "") else None


def _num(text, name, lineno):
    if text is None or text.strip() == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{name}: not a number: {text!r}", lineno) from None


def load_manifest(path, mapping=None) -> list:
    """Parse and validate a manifest.

    When ``mapping`` is given, per-dimension class counts are logged.
    """
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        log.warning("manifest %s is empty", path)
        return []
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"header lacks columns {missing}", 1)
    records, seen = [], set()
    for lineno, row in enumerate(reader, 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        values = dict(zip(header, row))
        for name in ("id", "path", "speaker", "session"):
            if not values[name].strip():
                raise MissingField(f"line {lineno}: field {name!r} is empty")
        rec_id = values["id"]
        if rec_id in seen:
            raise DuplicateId(f"line {lineno}: id {rec_id!r} appears twice")
        seen.add(rec_id)
        rec = UtteranceRecord(
            id=rec_id,
            path=values["path"],
            language=values["language"],
            speaker=values["speaker"],
            session=values["session"],
            sex=values["sex"],
            arousal_raw=_num(values["arousal_raw"], "arousal_raw", lineno),
            valence_raw=_num(values["valence_raw"], "valence_raw", lineno),
            trace_path_arousal=values["trace_path_arousal"] or None,
            trace_path_valence=values["trace_path_valence"] or None,
            extra={k: v for k, v in values.items() if k not in MANIFEST_COLUMNS},
            base_dir=path.parent,
        )
        for dim in DIMENSIONS:
            has_scalar = getattr(rec, f"{dim}_raw") is not None
            has_trace = getattr(rec, f"trace_path_{dim}") is not None
            if has_scalar and has_trace:
                raise ParseError(f"{dim}: both a scalar label and a trace path given", lineno)
            if not (has_scalar or has_trace):
                raise MissingField(f"line {lineno}: no {dim} label or trace")
        records.append(rec)
    if mapping is not None:
        for dim in DIMENSIONS:
            counts = class_counts(records, dim, mapping)
            log.info("%s %s: %d low / %d high", path.name, dim, counts[0], counts[1])
    return records


def class_counts(records, dimension: str, mapping) -> dict:
    counts = Counter(r.label(dimension, mapping) for r in records)
    return {0: counts.get(0, 0), 1: counts.get(1, 0)}


def _fmt(v):
    return "" if v is None else repr(v)


def write_manifest(path, records) -> None:
    extra_cols = []
    for r in records:
        extra_cols.extend(k for k in r.extra if k not in extra_cols)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(MANIFEST_COLUMNS) + extra_cols)
    for r in records:
        w.writerow(
            [r.id, r.path, r.language, r.speaker, r.session, r.sex,
             _fmt(r.arousal_raw), _fmt(r.valence_raw),
             r.trace_path_arousal or "", r.trace_path_valence or ""]
            + [r.extra.get(k, "") for k in extra_cols]
        )
    Path(path).write_text(buf.getvalue())


# --- featurization -------------------------------------------------------------


def featurize_records(records, cfg: FrontendConfig | None = None) -> dict:
    """Map record id -> FeatureMatrix, reading each record's WAV."""
    cfg = cfg or FrontendConfig()
    return {r.id: logmel(read_wav(r.audio_file), cfg) for r in records}


# --- synthetic corpora -----------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic corpus with a planted class cue.

    Class-1 utterances carry the cue (an energy burst, or a raised-pitch
    segment) starting at ``cue_position_s``; class-0 utterances do not.
    ``timbre_hz`` places the spectral peak of the harmonic carrier, which is
    how two synthetic "languages" are made to sound different.  Both the
    arousal and valence columns carry the planted class.
    """

    n_utterances: int = 200
    n_speakers: int = 10
    sample_rate: int = 16000
    duration_range: tuple = (7.5, 7.5)
    cue_kind: str = "energy"
    cue_position_s: float = 0.5
    cue_duration_s: float = 0.05
    cue_jitter_s: float = 0.0
    cue_gain: float = 8.0
    class_balance: float = 0.5
    noise_level: float = 0.0
    language: str = "A"
    timbre_hz: float = 500.0
    level: float = 0.03
    label_scale: str = "recola"
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.duration_range
        if self.n_utterances < 0 or self.n_speakers < 1:
            raise InvalidConfig("n_utterances must be >= 0 and n_speakers >= 1")
        if not 0 < lo <= hi:
            raise InvalidConfig("duration_range must satisfy 0 < min <= max")
        if self.cue_kind not in ("energy", "pitch"):
            raise InvalidConfig(f"cue_kind: unknown kind {self.cue_kind!r}")
        if self.cue_jitter_s < 0:
            raise InvalidConfig("cue_jitter_s must be >= 0")
        latest_end = self.cue_position_s + self.cue_jitter_s + self.cue_duration_s
        if self.cue_position_s < 0 or latest_end > lo:
            raise InvalidConfig(
                f"cue_position_s: cue may end at {latest_end} s, beyond the {lo} s utterances"
            )
        if self.cue_duration_s <= 0:
            raise InvalidConfig("cue_duration_s must be positive")
        if not 0.0 <= self.class_balance <= 1.0:
            raise InvalidConfig("class_balance must lie in [0, 1]")
        if self.noise_level < 0:
            raise InvalidConfig("noise_level must be >= 0")
        get_mapping(self.label_scale)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synthetic spec fields {sorted(unknown)}")
        d = dict(d)
        if "duration_range" in d:
            d["duration_range"] = tuple(d["duration_range"])
        spec = cls(**d)
        spec.validate()
        return spec


_RAW_FOR_CLASS = {"recola": (-0.5, 0.5), "iemocap": (2.0, 4.0)}


def _speaker_quotas(n_per_speaker, n_pos):
    """Largest-remainder split of ``n_pos`` positives across speakers."""
    total = sum(n_per_speaker)
    exact = [n * n_pos / total for n in n_per_speaker] if total else [0] * len(n_per_speaker)
    quotas = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - quotas[i]), i))
    for i in order[: n_pos - sum(quotas)]:
        quotas[i] += 1
    return quotas


def _ramp_window(n, sr, start, length, ramp_s=0.005):
    win = np.zeros(n)
    a, b = int(round(start * sr)), min(n, int(round((start + length) * sr)))
    win[a:b] = 1.0
    r = max(1, int(ramp_s * sr))
    edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
    win[a : a + r] *= edge[: len(win[a : a + r])]
    win[max(a, b - r) : b] *= edge[::-1][-len(win[max(a, b - r) : b]) :]
    return win


def synthesize_utterance(spec: SyntheticSpec, f0: float, duration: float, positive: bool, rng,
                         cue_start: float | None = None):
    sr = spec.sample_rate
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    f0_track = f0 * (1.0 + 0.05 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 2 * np.pi)))
    cue_start = spec.cue_position_s if cue_start is None else cue_start
    cue = _ramp_window(n, sr, cue_start, spec.cue_duration_s)
    if positive and spec.cue_kind == "pitch":
        f0_track = f0_track * (1.0 + 0.6 * cue)
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    carrier = np.zeros(n)
    bandwidth = 0.6 * spec.timbre_hz
    for h in range(1, int(4000 // f0) + 1):
        amp = math.exp(-0.5 * ((h * f0 - spec.timbre_hz) / bandwidth) ** 2) + 0.05 / h
        carrier += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    carrier /= np.sqrt(np.mean(carrier**2)) + 1e-12
    syllables = 0.85 + 0.15 * np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    signal = spec.level * syllables * carrier
    if positive and spec.cue_kind == "energy":
        signal *= 1.0 + (spec.cue_gain - 1.0) * cue
    if spec.noise_level > 0:
        signal = signal + spec.noise_level * rng.standard_normal(n)
    return np.clip(signal, -1.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, out_dir, seed: int | None = None) -> list:
    """Write ``wav/<id>.wav`` files and ``manifest.csv`` under ``out_dir``.

    Output is a pure function of ``spec`` and ``seed`` (default ``spec.seed``).
    """
    spec.validate()
    seed = spec.seed if seed is None else seed
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    lang = spec.language
    speakers = []
    for s in range(spec.n_speakers):
        sex = "F" if s % 2 == 0 else "M"
        base = rng.uniform(180.0, 240.0) if sex == "F" else rng.uniform(100.0, 140.0)
        speakers.append((f"{lang}_s{s:02d}", sex, f"{lang}_ses{s // 2 + 1}", base))

    owner = [i % spec.n_speakers for i in range(spec.n_utterances)]
    per_speaker = [owner.count(s) for s in range(spec.n_speakers)]
    n_pos = int(round(spec.n_utterances * spec.class_balance))
    labels = np.zeros(spec.n_utterances, dtype=int)
    for s, quota in enumerate(_speaker_quotas(per_speaker, n_pos)):
        mine = [i for i in range(spec.n_utterances) if owner[i] == s]
        labels[rng.permutation(mine)[:quota]] = 1

    low_raw, high_raw = _RAW_FOR_CLASS[get_mapping(spec.label_scale).kind]
    children = np.random.SeedSequence(seed).spawn(spec.n_utterances)
    records = []
    for i in range(spec.n_utterances):
        urng = np.random.default_rng(children[i])
        spk, sex, session, base = speakers[owner[i]]
        lo, hi = spec.duration_range
        duration = round(float(urng.uniform(lo, hi)), 3) if hi > lo else lo
        positive = bool(labels[i])
        f0 = base * (1 + 0.03 * urng.standard_normal())
        cue_start = spec.cue_position_s
        if spec.cue_jitter_s > 0:
            cue_start = round(cue_start + float(urng.uniform(0.0, spec.cue_jitter_s)), 3)
        audio = synthesize_utterance(spec, f0, duration, positive, urng, cue_start)
        uid = f"{lang}_{i:05d}"
        rel = f"wav/{uid}.wav"
        write_wav(out_dir / rel, audio, spec.sample_rate)
        raw = high_raw if positive else low_raw
        records.append(
            UtteranceRecord(
                id=uid, path=rel, language=lang, speaker=spk, session=session, sex=sex,
                arousal_raw=raw, valence_raw=raw,
                extra={
                    "duration_s": repr(duration),
                    "cue_position_s": repr(cue_start) if positive else "",
                    "cue_duration_s": repr(spec.cue_duration_s) if positive else "",
                },
                base_dir=out_dir,
            )
        )
    write_manifest(out_dir / "manifest.csv", records)
    spec_dict = asdict(spec)
    spec_dict["seed"] = seed
    (out_dir / "synthetic_spec.json").write_text(json.dumps(spec_dict, indent=2, sort_keys=True) + "\n")
    return records
