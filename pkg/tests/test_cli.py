import json
import numpy as np
import pytest

from acnn import cli, model

SYNTH = {"n_utterances": 10, "n_speakers": 5, "duration_range": [1.0, 1.0], "cue_position_s": 0.3, "seed": 3}
FAST = ["--n_kernels", "4", "--kernel_width", "5", "--pool_size", "10", "--epochs", "2", "--batch_size", "4"]


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def small_corpus(tmp_path):
    spec = write_json(tmp_path / "spec.json", SYNTH)
    assert cli.main(["synth", str(spec), "--out", str(tmp_path / "syn")]) == 0
    return tmp_path / "syn"


def mtimes(d):
    return {p: p.stat().st_mtime_ns for p in d.rglob("*") if p.is_file()}


def test_synth_layout(small_corpus):
    assert len(list((small_corpus / "wav").glob("*.wav"))) == 10
    assert len((small_corpus / "manifest.csv").read_text().splitlines()) == 11
    assert (small_corpus / "resolved_config.json").exists()


def test_synth_deterministic(tmp_path, small_corpus):
    spec = write_json(tmp_path / "spec2.json", SYNTH)
    assert cli.main(["synth", str(spec), "--out", str(tmp_path / "again")]) == 0
    for p in (small_corpus / "wav").iterdir():
        assert p.read_bytes() == (tmp_path / "again" / "wav" / p.name).read_bytes()
    assert (small_corpus / "manifest.csv").read_text() == (tmp_path / "again" / "manifest.csv").read_text()


def test_synth_invalid_cue(tmp_path, capsys):
    spec = write_json(tmp_path / "bad.json", {**SYNTH, "cue_position_s": 0.99})
    assert cli.main(["synth", str(spec), "--out", str(tmp_path / "x")]) != 0
    assert "cue_position_s" in capsys.readouterr().err


def test_featurize_empty_manifest(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    assert cli.main(["featurize", str(tmp_path / "empty.csv"), "--out", str(tmp_path / "f"), "--jobs", "1"]) == 0
    assert (tmp_path / "f" / "index.csv").read_text().splitlines() == ["id,cache_path,n_frames_valid"]


def test_featurize_missing_wav(tmp_path, small_corpus, capsys):
    (small_corpus / "wav" / "A_00003.wav").unlink()
    code = cli.main(["featurize", str(small_corpus / "manifest.csv"), "--out", str(tmp_path / "f"), "--jobs", "1"])
    assert code != 0
    assert "A_00003" in capsys.readouterr().err
    assert len((tmp_path / "f" / "index.csv").read_text().splitlines()) == 1 + 9


def test_featurize_idempotent(tmp_path, small_corpus):
    args = ["featurize", str(small_corpus / "manifest.csv"), "--out", str(tmp_path / "f"), "--jobs", "1"]
    assert cli.main(args) == 0
    before = mtimes(tmp_path / "f")
    assert len([p for p in before if p.suffix == ".acnf"]) == 10
    assert cli.main(args) == 0
    assert mtimes(tmp_path / "f") == before


def test_featurize_parallel_matches_serial(tmp_path, small_corpus):
    base = ["featurize", str(small_corpus / "manifest.csv")]
    assert cli.main(base + ["--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    for p in (tmp_path / "a" / "cache").iterdir():
        assert p.read_bytes() == (tmp_path / "b" / "cache" / p.name).read_bytes()


def plan_doc(small_corpus, features=None, **plan):
    entry = {"manifest": str(small_corpus / "manifest.csv"), "labels": "recola", "folds": "speaker"}
    if features:
        entry["features"] = str(features)
    return {"corpora": {"syn": entry}, "protocol": "mono", "sources": ["syn"], "repetitions": 1, **plan}


def test_run_invalid_protocol(tmp_path, small_corpus):
    plan = write_json(tmp_path / "p.json", plan_doc(small_corpus, protocol="quad"))
    assert cli.main(["run", str(plan), "--out", str(tmp_path / "o")] + FAST) == 2


def test_run_reports_identical(tmp_path, small_corpus, capsys):
    plan = write_json(tmp_path / "p.json", plan_doc(small_corpus, name="mono"))
    for out in ("o1", "o2"):
        assert cli.main(["run", str(plan), "--out", str(tmp_path / out), "--jobs", "1", "--seed", "5"] + FAST) == 0
    assert (tmp_path / "o1/mono.json").read_bytes() == (tmp_path / "o2/mono.json").read_bytes()
    report = json.loads((tmp_path / "o1/mono.json").read_text())
    assert report["seed"] == 5 and report["hp"]["n_kernels"] == 4
    assert len((tmp_path / "o1/results.csv").read_text().splitlines()) == 1 + 5
    assert "mono-lingual" in capsys.readouterr().out
    cfg = json.loads((tmp_path / "o1/resolved_config.json").read_text())
    assert cfg["hp"]["epochs"] == 2 and cfg["seed"] == 5


def test_config_file_and_flag_precedence(tmp_path, small_corpus):
    conf = write_json(tmp_path / "c.json", {"hp": {"n_kernels": 6, "epochs": 1}, "seed": 9})
    plan = write_json(tmp_path / "p.json", plan_doc(small_corpus, name="m"))
    args = ["run", str(plan), "--out", str(tmp_path / "o"), "--config", str(conf), "--n-kernels", "3",
            "--kernel_width", "5", "--pool_size", "10", "--jobs", "1"]
    assert cli.main(args) == 0
    cfg = json.loads((tmp_path / "o/resolved_config.json").read_text())
    assert cfg["hp"]["n_kernels"] == 3 and cfg["hp"]["epochs"] == 1 and cfg["seed"] == 9


def test_run_with_feature_cache(tmp_path, small_corpus):
    assert cli.main(["featurize", str(small_corpus / "manifest.csv"), "--out", str(tmp_path / "f"), "--jobs", "1"]) == 0
    ok = write_json(tmp_path / "ok.json", plan_doc(small_corpus, tmp_path / "f", name="m"))
    assert cli.main(["run", str(ok), "--out", str(tmp_path / "o"), "--jobs", "1"] + FAST) == 0


def test_cross_on_same_corpus_is_usage_error(tmp_path, small_corpus):
    entry = {"manifest": str(small_corpus / "manifest.csv"), "labels": "recola"}
    doc = {"corpora": {"src": entry, "tgt": dict(entry)}, "protocol": "cross", "sources": ["src"],
           "target": "tgt", "repetitions": 1}
    plan = write_json(tmp_path / "p.json", doc)
    assert cli.main(["run", str(plan), "--out", str(tmp_path / "o"), "--jobs", "1"] + FAST) == 2


def test_failed_cells_marked(tmp_path, small_corpus, capsys):
    other = write_json(tmp_path / "b.json", {**SYNTH, "language": "B"})
    assert cli.main(["synth", str(other), "--out", str(tmp_path / "synB")]) == 0
    # 10 target utterances cannot supply 100 fine-tuning samples per fold
    doc = {
        "corpora": {"A": {"manifest": str(small_corpus / "manifest.csv")},
                    "B": {"manifest": str(tmp_path / "synB" / "manifest.csv")}},
        "protocol": "cross_ft", "sources": ["A"], "target": "B", "repetitions": 1, "name": "ft",
    }
    plan = write_json(tmp_path / "p.json", doc)
    assert cli.main(["run", str(plan), "--out", str(tmp_path / "o"), "--jobs", "1"] + FAST) == 1
    assert "FAILED" in (tmp_path / "o" / "results.csv").read_text()
    report = json.loads((tmp_path / "o" / "ft.json").read_text())
    assert report["status"] == "FAILED" and "PoolTooSmall" in report["failures"][0]["error"]
    assert "PoolTooSmall" in capsys.readouterr().err


def test_bundled_smoke_plan(tmp_path, capsys):
    assert cli.main(["run", "smoke", "--out", str(tmp_path / "o"), "--jobs", "1"]) == 0
    out = capsys.readouterr().out
    assert "smoke arousal" in out
    report = json.loads((tmp_path / "o/smoke_mono_arousal.json").read_text())
    assert 0.0 <= report["results"]["smoke"]["grand_mean"] <= 1.0


def test_unknown_plan_name(tmp_path):
    assert cli.main(["run", "nonexistent", "--out", str(tmp_path / "o")]) == 2


def train_checkpoint(tmp_path, small_corpus, extra=()):
    out = tmp_path / "train"
    args = ["train", str(small_corpus / "manifest.csv"), "--out", str(out), "--jobs", "1"] + FAST + list(extra)
    assert cli.main(args) == 0
    return out / "model.acnp"


def test_train_and_inspect(tmp_path, small_corpus, capsys):
    ckpt = train_checkpoint(tmp_path, small_corpus)
    _, hp, T, meta = model.load_model(ckpt)
    assert T == 748 and hp.n_kernels == 4 and meta["dimension"] == "arousal"
    assert cli.main(["inspect-checkpoint", str(ckpt)]) == 0
    assert "attention steps 74" in capsys.readouterr().out


def test_analyze_attention_zero_init(tmp_path, small_corpus, capsys):
    hp = model.HyperParams(n_kernels=4, kernel_width=5, pool_size=10)
    params = model.init_params(hp, 748, np.random.default_rng(0))
    model.save_model(tmp_path / "zero.acnp", params, hp, 748, {"fold": "all"})
    out = tmp_path / "att"
    code = cli.main(["analyze-attention", "--checkpoint", str(tmp_path / "zero.acnp"),
                     "--manifest", str(small_corpus / "manifest.csv"), "--out", str(out), "--jobs", "1"])
    assert code == 0
    assert len((out / "attention_records.csv").read_text().splitlines()) == 1 + 10
    summary = (out / "attention_summary.csv").read_text().splitlines()
    assert summary[0] == "position,fraction" and summary[1] == "0,1.0"
    printed = capsys.readouterr().out
    assert "pos 0: 1.000" in printed and "localization score" in printed


def test_analyze_attention_shape_mismatch(tmp_path, small_corpus, capsys):
    hp = model.HyperParams(n_kernels=4, kernel_width=5, pool_size=10)
    params = model.init_params(hp, 500, np.random.default_rng(0))
    model.save_model(tmp_path / "short.acnp", params, hp, 500)
    code = cli.main(["analyze-attention", "--checkpoint", str(tmp_path / "short.acnp"),
                     "--manifest", str(small_corpus / "manifest.csv"), "--out", str(tmp_path / "att")])
    assert code != 0
    assert "ShapeMismatch" in capsys.readouterr().err


def test_analyze_attention_fold_checkpoint_uses_train_split(tmp_path, small_corpus):
    ckpt = train_checkpoint(tmp_path, small_corpus, ["--fold", "0"])
    twin = ckpt.with_name("twin.acnp")
    twin.write_bytes(ckpt.read_bytes())
    twin.with_name("twin.acnp.meta").write_text(ckpt.with_name("model.acnp.meta").read_text())
    out = tmp_path / "att"
    code = cli.main(["analyze-attention", "--checkpoint", str(ckpt), "--checkpoint", str(twin),
                     "--manifest", str(small_corpus / "manifest.csv"), "--out", str(out)])
    assert code == 0
    assert (out / "attention_summary_runs.csv").exists()
    # 5 speakers: 3 in training, two utterances each
    rows = (out / "attention_records_model.csv").read_text().splitlines()
    assert len(rows) == 1 + 6


def test_module_entry_point_help():
    with pytest.raises(SystemExit) as err:
        cli.main(["--help"])
    assert err.value.code == 0
