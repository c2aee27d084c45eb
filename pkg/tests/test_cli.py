import json
import re
import subprocess
import sys

import numpy as np
import pytest

from gazebench import cli
from gazebench.annotation import AnnotationConfig, annotate_session
from gazebench.evaluation import dataset_stats, evaluate_model
from gazebench.report import metrics_csv
from gazebench.synthworld import read_session
from gazebench.training import load_checkpoint


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"scene": {"duration": 10.0}, "train": {"epochs": 1}}))
    assert run("generate", "--config", cfg, "--out", root / "data", "--seed", 40, "--sessions", 3) == 0
    assert run("annotate", "--data", root / "data", "--config", cfg) == 0
    return root


def test_generate_layout(corpus):
    manifest = json.loads((corpus / "data" / "manifest.json").read_text())
    assert manifest["sessions"] == ["s000040", "s000041", "s000042"]
    for name in manifest["sessions"]:
        assert (corpus / "data" / name / "frames_neck.gzt").exists()


def test_generate_single_and_rerun_identical(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": {"duration": 2.0}}))
    for out in ("a", "b"):
        assert run("generate", "--config", cfg, "--out", tmp_path / out, "--seed", 3) == 0
    dirs = [p for p in (tmp_path / "a").iterdir() if p.is_dir()]
    assert len(dirs) == 1
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_missing_seed_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("generate", "--out", tmp_path)
    assert exc.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "gazebench", "generate", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "--seed" in proc.stderr


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"scene": {"fps": -1}}))
    assert run("generate", "--config", cfg, "--out", tmp_path / "o", "--seed", 1) == 2
    cfg.write_text("{not json")
    assert run("generate", "--config", cfg, "--out", tmp_path / "o", "--seed", 1) == 2


def test_annotate_empty_dir(tmp_path, capsys):
    assert run("annotate", "--data", tmp_path) == 1
    assert "NoSessions" in capsys.readouterr().err


def test_annotate_outputs_and_idempotent(corpus):
    data = corpus / "data"
    first = (data / "clips.jsonl").read_bytes()
    split = json.loads((data / "split.json").read_text())
    assert split == {"train": ["s000040", "s000041"], "test": ["s000042"]}
    rows = [json.loads(line) for line in first.decode().splitlines()]
    assert len(rows) == 3 * 2 * 2  # sessions x clips x views
    assert all(len(r["labels"]) == 100 for r in rows)
    assert run("annotate", "--data", data, "--config", corpus / "cfg.json") == 0
    assert (data / "clips.jsonl").read_bytes() == first


def test_default_corpus_split_ratio():
    split = cli.split_sessions([f"s{i:06d}" for i in range(10)])
    n_train, n_test = len(split["train"]), len(split["test"])
    assert not set(split["train"]) & set(split["test"]) and n_train + n_test == 10
    assert abs(n_train / (n_train + n_test) - 2 / 3) <= 0.05


def test_train_requires_seed_and_valid_variant(corpus, tmp_path):
    assert run("train", "--data", corpus / "data", "--variant", "base", "--out", tmp_path / "m.gzck") == 2
    with pytest.raises(SystemExit) as exc:
        run("train", "--data", corpus / "data", "--variant", "mixed", "--seed", 1, "--out", tmp_path / "m")
    assert exc.value.code == 2


@pytest.fixture(scope="module")
def aux_ckpt(corpus):
    ck = corpus / "ck" / "aux.gzck"
    assert run("train", "--data", corpus / "data", "--variant", "aux", "--config", corpus / "cfg.json",
               "--out", ck, "--seed", 5, "--epochs", 2, "--lr", 1e-3) == 0
    return ck


def test_train_outputs(aux_ckpt):
    params, state, echo = load_checkpoint(aux_ckpt)
    assert echo["train"]["variant"] == "aux" and echo["train"]["epochs"] == 2  # flag beats config
    assert echo["train"]["seed"] == 5 and state.step == 2 * 4
    hist = aux_ckpt.with_suffix(".history.csv").read_text().splitlines()
    assert hist[0].startswith("epoch,total,heatmap,inbound") and len(hist) == 3


def test_train_zero_lr_smoke(corpus, tmp_path):
    ck = tmp_path / "z.gzck"
    assert run("train", "--data", corpus / "data", "--variant", "base", "--seed", 1,
               "--epochs", 1, "--lr", 0, "--out", ck) == 0
    assert ck.exists()


def test_train_colearn_stores_both_models(corpus, tmp_path):
    ck = tmp_path / "co.gzck"
    assert run("train", "--data", corpus / "data", "--variant", "colearn", "--seed", 1,
               "--epochs", 1, "--max-clips", 2, "--out", ck) == 0
    params, state, _ = load_checkpoint(ck)
    assert "enc1.w" in params and "head/enc1.w" in params
    assert "head/enc1.w" in state.m


def test_eval_missing_checkpoint(corpus, tmp_path, capsys):
    assert run("eval", "--data", corpus / "data", "--ckpt", tmp_path / "nope.gzck", "--report", tmp_path) == 1
    assert "not found" in capsys.readouterr().err


def test_eval_matches_library_and_is_deterministic(corpus, aux_ckpt, tmp_path):
    assert run("eval", "--data", corpus / "data", "--ckpt", aux_ckpt, "--report", tmp_path / "r1") == 0
    assert run("eval", "--data", corpus / "data", "--ckpt", aux_ckpt, "--report", tmp_path / "r2") == 0
    files = sorted(p.relative_to(tmp_path / "r1") for p in (tmp_path / "r1").rglob("*") if p.is_file())
    assert {str(f) for f in files} >= {"metrics.csv", "figures/confusion_aux.svg", "figures/loss_aux.svg"}
    for f in files:
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
    # library-level equivalent
    params, _, _ = load_checkpoint(aux_ckpt)
    session = read_session(corpus / "data" / "s000042")
    clips = [c for c in annotate_session(session).clips if c.view == "neck"]
    rep = evaluate_model(params, clips, AnnotationConfig(), variant="aux", with_classifier=True)
    assert (tmp_path / "r1" / "metrics.csv").read_text() == metrics_csv([rep])


def test_stats_command(corpus, tmp_path, capsys):
    assert run("stats", "--data", corpus / "data", "--report", tmp_path) == 0
    out = capsys.readouterr().out
    m = re.search(r"neck: out-of-bound (\d+\.\d)%", out)
    assert m
    stats = json.loads((tmp_path / "stats.json").read_text())
    sessions = [read_session(corpus / "data" / n) for n in ("s000040", "s000041", "s000042")]
    lib = dataset_stats(sessions)
    assert stats["neck"]["out_of_bound_rate"] == lib["neck"]["out_of_bound_rate"]
    assert m.group(1) == f"{100 * lib['neck']['out_of_bound_rate']:.1f}"
    assert (tmp_path / "figures" / "gaze_histogram.svg").exists()


def test_threads_env(monkeypatch):
    monkeypatch.setenv("GAZEBENCH_THREADS", "3")
    assert cli._threads() == 3
    monkeypatch.setenv("GAZEBENCH_THREADS", "x")
    assert cli._threads() == 1


def test_annotate_write_targets(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scene": {"duration": 6.0}}))
    assert run("generate", "--config", cfg, "--out", tmp_path / "d", "--seed", 8) == 0
    assert run("annotate", "--data", tmp_path / "d", "--config", cfg, "--write-targets") == 0
    from gazebench import tensorio
    maps = tensorio.load(tmp_path / "d" / "s000008" / "targets_neck.gzt")
    assert maps.ndim == 3 and maps.shape[1:] == (64, 64)
    np.testing.assert_allclose(maps.sum(axis=(1, 2)), 1.0, atol=1e-4)
