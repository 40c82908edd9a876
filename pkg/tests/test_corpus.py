import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acnn import corpus
from acnn.errors import DuplicateId, EmptyTurn, InvalidConfig, MissingField, OutOfRange, ParseError
from acnn.frontend import read_wav

HEADER = ",".join(corpus.MANIFEST_COLUMNS)


# --- label mapping ---


@pytest.mark.parametrize(
    "kind,raw,cls",
    [
        ("iemocap", 1.0, 0), ("iemocap", 2.5, 0), ("iemocap", 2.6, 1), ("iemocap", 5.0, 1),
        ("recola", -1.0, 0), ("recola", 0.0, 0), ("recola", 0.01, 1), ("recola", 1.0, 1),
    ],
)
def test_boundaries(kind, raw, cls):
    assert corpus.map_label(raw, corpus.get_mapping(kind)) == cls


@pytest.mark.parametrize("kind,raw", [("iemocap", 0.99), ("iemocap", 5.01), ("recola", -1.2), ("recola", 1.5)])
def test_out_of_range(kind, raw):
    with pytest.raises(OutOfRange):
        corpus.map_label(raw, corpus.get_mapping(kind))


@given(st.floats(-1.0, 1.0))
def test_recola_partition(x):
    assert corpus.map_label(x, corpus.RECOLA) == (0 if x <= 0.0 else 1)


@given(st.floats(1.0, 5.0))
def test_iemocap_partition(x):
    assert corpus.map_label(x, corpus.IEMOCAP) == (0 if x <= 2.5 else 1)


# --- trace aggregation ---


def test_aggregate_examples():
    assert corpus.aggregate_trace([[(0.0, 0.3), (0.04, 0.3), (0.08, 0.3)]]) == pytest.approx(0.3)
    assert corpus.aggregate_trace([[(0, 0.2)], [(0, -0.4)]]) == pytest.approx(-0.1)
    assert corpus.aggregate_trace([[(1.0, 0.1), (1.04, 0.3), (9.0, 5.0)]], (1.0, 2.0)) == pytest.approx(0.2)


def test_aggregate_empty_turn():
    with pytest.raises(EmptyTurn):
        corpus.aggregate_trace([[(0.0, 0.1)], [(5.0, 0.2)]], (0.0, 1.0))
    with pytest.raises(EmptyTurn):
        corpus.aggregate_trace([])


@settings(max_examples=50)
@given(st.lists(st.lists(st.tuples(st.floats(0, 10), st.floats(-1, 1)), min_size=1, max_size=8), min_size=1, max_size=5),
       st.randoms())
def test_aggregate_order_invariant(traces, rnd):
    ref = corpus.aggregate_trace(traces)
    shuffled = [rnd.sample(t, len(t)) for t in traces]
    rnd.shuffle(shuffled)
    assert corpus.aggregate_trace(shuffled) == pytest.approx(ref, abs=1e-12)


def test_trace_file_round_trip(tmp_path):
    traces = [[(0.0, 0.25), (0.04, -0.5)], [(0.0, 0.125)]]
    corpus.write_traces(tmp_path / "t.csv", traces)
    assert corpus.read_traces(tmp_path / "t.csv") == traces


# --- manifests ---


def write(tmp_path, body, name="m.csv"):
    p = tmp_path / name
    p.write_text(body)
    return p


def test_empty_manifest_warns(tmp_path, caplog):
    assert corpus.load_manifest(write(tmp_path, "")) == []
    assert "empty" in caplog.text


def test_missing_speaker(tmp_path):
    p = write(tmp_path, HEADER + "\nu1,a.wav,en,,ses1,F,2.0,3.0,,\n")
    with pytest.raises(MissingField):
        corpus.load_manifest(p)


def test_missing_label(tmp_path):
    p = write(tmp_path, HEADER + "\nu1,a.wav,en,s1,ses1,F,,3.0,,\n")
    with pytest.raises(MissingField):
        corpus.load_manifest(p)


def test_duplicate_id(tmp_path):
    row = "u1,a.wav,en,s1,ses1,F,2.0,3.0,,\n"
    with pytest.raises(DuplicateId):
        corpus.load_manifest(write(tmp_path, HEADER + "\n" + row + row))


def test_parse_error_has_line_number(tmp_path):
    p = write(tmp_path, HEADER + "\nu1,a.wav,en,s1,ses1,F,2.0,3.0,,\nu2,b.wav,en,s1,ses1,F,high,3.0,,\n")
    with pytest.raises(ParseError) as err:
        corpus.load_manifest(p)
    assert err.value.line == 3


def test_scalar_and_trace_conflict(tmp_path):
    p = write(tmp_path, HEADER + "\nu1,a.wav,en,s1,ses1,F,0.2,0.1,t.csv,\n")
    with pytest.raises(ParseError):
        corpus.load_manifest(p)


def test_manifest_round_trip(tmp_path):
    body = (
        HEADER + ",turn_start,turn_end\n"
        "u1,a.wav,en,s1,ses1,F,2.0,3.5,,,,\n"
        "u2,b.wav,en,s2,ses1,M,4.25,1.0,,,,\n"
        "u3,c.wav,fr,s3,ses2,F,,-0.5,t.csv,,0.5,2.0\n"
    )
    (tmp_path / "t.csv").write_text("# a\n0.4,0.9\n1.0,0.1\n1.5,0.3\n# b\n1.2,0.5\n")
    recs = corpus.load_manifest(write(tmp_path, body))
    assert len(recs) == 3
    assert recs[1].arousal_raw == 4.25 and recs[2].trace_path_arousal == "t.csv"
    assert recs[2].raw_label("arousal") == pytest.approx((0.2 + 0.5) / 2)
    corpus.write_manifest(tmp_path / "again.csv", recs)
    again = corpus.load_manifest(tmp_path / "again.csv")
    assert again == recs


def test_class_counts(tmp_path):
    body = HEADER + "\n" + "".join(f"u{i},a.wav,en,s1,ses1,F,{v},3.0,,\n" for i, v in enumerate([1, 2.5, 2.6, 5]))
    recs = corpus.load_manifest(write(tmp_path, body), mapping="iemocap")
    assert corpus.class_counts(recs, "arousal", "iemocap") == {0: 2, 1: 2}


@pytest.mark.skipif("ACNN_IEMOCAP_MANIFEST" not in os.environ, reason="licensed IEMOCAP manifest not available")
def test_iemocap_class_distribution():
    recs = corpus.load_manifest(os.environ["ACNN_IEMOCAP_MANIFEST"])
    assert corpus.class_counts(recs, "arousal", "iemocap") == {0: 3121, 1: 6918}
    assert corpus.class_counts(recs, "valence", "iemocap") == {0: 3421, 1: 6618}


@pytest.mark.skipif("ACNN_RECOLA_MANIFEST" not in os.environ, reason="licensed Recola manifest not available")
def test_recola_class_distribution():
    recs = corpus.load_manifest(os.environ["ACNN_RECOLA_MANIFEST"])
    assert corpus.class_counts(recs, "arousal", "recola") == {0: 520, 1: 788}
    assert corpus.class_counts(recs, "valence", "recola") == {0: 241, 1: 1067}


# --- synthetic generator ---


SMALL = dict(n_utterances=12, n_speakers=4, duration_range=(2.0, 2.0), seed=5)


def frame_rms(x, sr, start, end):
    seg = x[int(start * sr) : int(end * sr)]
    return math.sqrt(float(np.mean(seg**2)))


def test_energy_cue_rms(tmp_path):
    spec = corpus.SyntheticSpec(**SMALL)
    recs = corpus.generate_synthetic(spec, tmp_path)
    positives = [r for r in recs if r.label("arousal", "recola") == 1]
    assert positives
    for r in positives:
        x = read_wav(r.audio_file).samples
        pos, dur = r.cue_position, float(r.extra["cue_duration_s"])
        cue = frame_rms(x, 16000, pos + 0.01, pos + dur - 0.01)
        background = math.sqrt(
            (np.sum(x[: int(pos * 16000)] ** 2) + np.sum(x[int((pos + dur) * 16000) :] ** 2))
            / (len(x) - int(dur * 16000))
        )
        assert cue >= 5 * background


def test_balance_and_cue_metadata(tmp_path):
    recs = corpus.generate_synthetic(corpus.SyntheticSpec(n_utterances=100, n_speakers=10, duration_range=(1.0, 1.0)), tmp_path)
    labels = [r.label("valence", "recola") for r in recs]
    assert labels.count(1) == labels.count(0) == 50
    assert all((r.cue_position is not None) == (lab == 1) for r, lab in zip(recs, labels))
    assert len({r.speaker for r in recs}) == 10
    back = corpus.load_manifest(tmp_path / "manifest.csv")
    assert [r.id for r in back] == [r.id for r in recs]


def test_generation_is_byte_identical(tmp_path):
    spec = corpus.SyntheticSpec(**SMALL)
    corpus.generate_synthetic(spec, tmp_path / "a")
    corpus.generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 12 + 2
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    corpus.generate_synthetic(spec, tmp_path / "c", seed=6)
    assert (tmp_path / "c/wav/A_00000.wav").read_bytes() != (tmp_path / "a/wav/A_00000.wav").read_bytes()


def test_pitch_cue_and_iemocap_scale(tmp_path):
    spec = corpus.SyntheticSpec(**{**SMALL, "cue_kind": "pitch", "label_scale": "iemocap"})
    recs = corpus.generate_synthetic(spec, tmp_path)
    assert {r.label("arousal", "iemocap") for r in recs} == {0, 1}


@pytest.mark.parametrize(
    "field,value",
    [("cue_position_s", 7.49), ("cue_position_s", -1.0), ("cue_kind", "loud"), ("class_balance", 1.5)],
)
def test_invalid_spec_names_field(field, value):
    with pytest.raises(InvalidConfig) as err:
        corpus.SyntheticSpec.from_dict({field: value})
    assert field in str(err.value)


def test_unknown_spec_field():
    with pytest.raises(InvalidConfig):
        corpus.SyntheticSpec.from_dict({"n_utterance": 3})


def test_synthetic_corpus_is_linearly_learnable(corpus_a):
    # oracle guard: a plain linear model on clip-mean band energies separates the classes
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import cross_val_score

    records, feats = corpus_a
    X = np.array([feats[r.id].values[:, : feats[r.id].n_frames_valid].mean(axis=1) for r in records])
    y = np.array([r.label("arousal", "recola") for r in records])
    clf = LogisticRegression(C=1e4, max_iter=20000)
    assert clf.fit(X, y).score(X, y) >= 0.95
    assert cross_val_score(clf, X, y, cv=5).mean() >= 0.95
