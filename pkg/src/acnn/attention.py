"""Attention-weight analysis: where does the model look?

Per-sample attention vectors are reduced to the argmax position and the gap
between the largest and second-largest weight.  Summaries give, for every
pooled position, the fraction of samples whose attention peaks there.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import model as acnn
from .errors import EmptyInput, MissingCueMetadata, MissingFeatures
from .frontend import FrontendConfig


@dataclass
class AttentionRecord:
    id: str
    alpha: np.ndarray
    argmax: int
    max: float
    second_max: float

    @classmethod
    def from_alpha(cls, uid, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        top = int(np.argmax(alpha))  # lowest index on ties
        ordered = np.sort(alpha)[::-1]
        second = float(ordered[1]) if alpha.size > 1 else 0.0
        return cls(str(uid), alpha, top, float(ordered[0]), second)

    @property
    def gap(self) -> float:
        return self.max - self.second_max


@dataclass
class AttentionSummary:
    histogram: np.ndarray
    dominance_rate: float
    threshold: float
    n_samples: int
    label: str = ""

    def top_positions(self, k=3):
        order = np.argsort(-self.histogram, kind="stable")[:k]
        return [(int(i), float(self.histogram[i])) for i in order]


def extract_attention(params, hp, data, ids=None) -> list:
    """Inference-mode attention for every sample.

    ``data`` is either a ``Dataset`` or a mapping id -> FeatureMatrix, in which
    case ``ids`` selects (and orders) the samples.
    """
    if isinstance(data, acnn.Dataset):
        X, ids = data.X, list(data.ids)
    else:
        ids = list(data) if ids is None else list(ids)
        missing = [i for i in ids if i not in data]
        if missing:
            raise MissingFeatures(f"no features for {missing[:5]}")
        if not ids:
            return []
        X = np.stack([np.asarray(getattr(data[i], "values", data[i])) for i in ids])
    _, alphas = acnn.predict(params, hp, X)
    return [AttentionRecord.from_alpha(i, a) for i, a in zip(ids, alphas)]


def summarize(records, threshold: float = 0.5, label: str = "") -> AttentionSummary:
    if not records:
        raise EmptyInput("no attention records to summarize")
    n_pos = len(records[0].alpha)
    counts = np.bincount([r.argmax for r in records], minlength=n_pos).astype(np.float64)
    dominance = sum(1 for r in records if r.gap > threshold) / len(records)
    return AttentionSummary(counts / len(records), dominance, threshold, len(records), label)


def summarize_runs(runs: dict, threshold: float = 0.5) -> list:
    """One summary per labelled run plus a pooled summary over all of them."""
    out = [summarize(recs, threshold, label=name) for name, recs in runs.items()]
    pooled = [r for recs in runs.values() for r in recs]
    out.append(summarize(pooled, threshold, label="pooled"))
    return out


def segment_map(hp, input_T: int, cfg: FrontendConfig | None = None, mode: str = "tile") -> list:
    """Input time interval [start_s, end_s) covered by each pooled step.

    ``tile``: step j owns frames [j*s, (j+1)*s); the last step extends to the
    end of the input, so the intervals tile [0, max_seconds].
    ``receptive``: the full receptive field, frames [j*s, j*s + p + w - 2],
    each frame ending one frame length after its start.
    """
    cfg = cfg or FrontendConfig()
    shift = cfg.shift_ms / 1000.0
    n = hp.pooled_steps(input_T)
    s, p, w = hp.stride, hp.pool_size, hp.kernel_width
    if mode == "tile":
        edges = [j * s * shift for j in range(n)] + [cfg.max_seconds]
        return [(edges[j], edges[j + 1] if j + 1 < n else cfg.max_seconds) for j in range(n)]
    if mode == "receptive":
        frame = cfg.frame_ms / 1000.0
        return [(j * s * shift, (j * s + p + w - 2) * shift + frame) for j in range(n)]
    raise ValueError(f"unknown segment mode {mode!r}")


def segment_of(t: float, segments) -> list:
    return [j for j, (a, b) in enumerate(segments) if a <= t < b or (j == len(segments) - 1 and t == b)]


def localization_score(records, cues: dict, segments) -> float:
    """Fraction of cue-bearing samples whose attention peak covers the cue time.

    ``cues`` maps utterance id -> cue position in seconds, or None for
    samples without a cue (they are skipped).
    """
    scored = hits = 0
    for r in records:
        if r.id not in cues:
            raise MissingCueMetadata(f"no cue metadata for {r.id}")
        pos = cues[r.id]
        if pos is None:
            continue
        scored += 1
        a, b = segments[r.argmax]
        hits += a <= pos < b or (r.argmax == len(segments) - 1 and pos == b)
    if scored == 0:
        raise MissingCueMetadata("no record carries a cue position")
    return hits / scored


def records_csv(records) -> str:
    n = len(records[0].alpha) if records else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id"] + [f"alpha_{i}" for i in range(n)] + ["argmax", "max", "second_max"])
    for r in records:
        w.writerow([r.id] + [repr(float(a)) for a in r.alpha] + [r.argmax, repr(r.max), repr(r.second_max)])
    return buf.getvalue()


def summary_csv(summaries) -> str:
    if isinstance(summaries, AttentionSummary):
        summaries = [summaries]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "position", "fraction"])
    for s in summaries:
        for i, frac in enumerate(s.histogram):
            w.writerow([s.label, i, repr(float(frac))])
    return buf.getvalue()


def format_summary(s: AttentionSummary) -> str:
    top = ", ".join(f"pos {i}: {frac:.3f}" for i, frac in s.top_positions())
    name = f"[{s.label}] " if s.label else ""
    return (
        f"{name}n={s.n_samples} dominance(>{s.threshold:g})={s.dominance_rate:.3f} top: {top}"
    )
