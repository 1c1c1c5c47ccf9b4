import json
import subprocess
import sys

import pytest

from latent_router.cli import main

TINY = ["--L", "16", "--M", "2", "--d-model", "16", "--n-heads", "2", "--d-ff", "32",
        "--n-layers-enc", "1", "--n-layers-dec", "1"]
NO_M = TINY[:2] + TINY[4:]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def corpora(tmp_path):
    paths = {}
    for kind, seed, size in [("code", 1, 30), ("text", 2, 30), ("random", 3, 10)]:
        p = tmp_path / f"{kind}.lrc"
        assert run("gen", "--kind", kind, "--seed", seed, "--size", size, "--out", p, "--L", 16) == 0
        paths[kind] = p
    return paths


def test_gen_writes_corpus_and_manifest(tmp_path, corpora):
    raw = corpora["code"].read_bytes()
    assert raw[:4] == b"LRC1" and len(raw) == 16 + 30 * 16 * 2
    m = json.loads((tmp_path / "code.lrc.manifest.json").read_text())
    assert set(m) >= {"command_line", "config", "seeds", "inputs", "outputs", "tool_version", "wall_clock_seconds"}
    assert m["seeds"] == {"seed": 1}


def test_gen_is_deterministic(tmp_path, corpora):
    again = tmp_path / "again.lrc"
    run("gen", "--kind", "code", "--seed", 1, "--size", 30, "--out", again, "--L", 16)
    assert again.read_bytes() == corpora["code"].read_bytes()


def test_gen_zero_size_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("gen", "--kind", "code", "--size", 0, "--out", tmp_path / "x")
    assert e.value.code == 2


def test_train_eval_route_analyze(tmp_path, corpora, capsys):
    ck = {}
    for kind in ("code", "text"):
        ck[kind] = tmp_path / f"{kind}.ckpt"
        assert run("train", "--corpus", corpora[kind], "--val", corpora[kind], "--out", ck[kind],
                   "--steps", 4, "--batch-size", 4, "--eval-every", 2, "--trace", tmp_path / f"{kind}.trace.csv",
                   *TINY) == 0
    assert "val_tra=" in capsys.readouterr().out
    assert (tmp_path / "code.trace.csv").read_text().startswith("step,train_loss,val_tra")

    assert run("eval", "--checkpoint", ck["code"], "--corpus", corpora["text"], "--out", tmp_path / "e.csv") == 0
    out = capsys.readouterr().out
    assert out.startswith("tra=") and "loss=" in out
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 31

    assert run("route", "--expert", f"code={ck['code']}", "--expert", f"text={ck['text']}",
               "--corpus", f"code={corpora['code']}", "--corpus", f"text={corpora['text']}",
               "--tra-accept", 0, "--out", tmp_path / "r.csv", "--summary", tmp_path / "s.json") == 0
    s = json.loads((tmp_path / "s.json").read_text())
    assert s["blocks"] == 60 and set(s["per_tier_accuracy"]) == {"code", "text"}
    assert s["novel_fraction"] == 0.0

    adir = tmp_path / "an"
    assert run("analyze", "--checkpoint", ck["code"], "--corpus", f"code={corpora['code']}",
               "--corpus", f"text={corpora['text']}", "--out", adir) == 0
    res = json.loads((adir / "analysis.json").read_text())
    assert res["feature_width"] == 32 and 0.0 <= res["probe_accuracy"] <= 1.0
    for name in ("pca.csv", "projection.csv", "latents.csv", "analysis.manifest.json"):
        assert (adir / name).exists()


def test_train_is_byte_reproducible(tmp_path, corpora):
    outs = []
    for i in range(2):
        p = tmp_path / f"m{i}.ckpt"
        run("train", "--corpus", corpora["code"], "--out", p, "--steps", 3, "--batch-size", 4, *TINY)
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_config_file_is_overridden_by_flags(tmp_path, corpora):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"L": 16, "M": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,
                                         "n_layers_enc": 1, "n_layers_dec": 1},
                               "train": {"steps": 50, "batch_size": 4}}))
    p = tmp_path / "m.ckpt"
    assert run("train", "--corpus", corpora["code"], "--out", p, "--config", cfg, "--steps", 2) == 0
    m = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert m["config"]["train"]["steps"] == 2 and m["config"]["model"]["M"] == 2


def test_ablate(tmp_path, corpora, capsys):
    out = tmp_path / "ab.csv"
    assert run("ablate", "--corpus", corpora["code"], "--val", corpora["code"], "--Ms", "1,2", "--out", out,
               "--steps", 2, "--batch-size", 4, *NO_M) == 0
    assert out.read_text().splitlines()[0] == "M,compression_ratio,val_tra"
    assert run("ablate", "--corpus", corpora["code"], "--val", corpora["code"], "--Ms", "2,2", "--out", out,
               "--L", 16) == 2


def test_errors_and_exit_codes(tmp_path, corpora, capsys):
    # corpus with L=16 against a default L=64 model
    assert run("train", "--corpus", corpora["code"], "--out", tmp_path / "m", "--steps", 1) == 2
    assert "config mismatch" in capsys.readouterr().err
    assert run("eval", "--checkpoint", tmp_path / "missing", "--corpus", corpora["code"],
               "--out", tmp_path / "e") == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"LRCK" + bytes(40))
    assert run("eval", "--checkpoint", bad, "--corpus", corpora["code"], "--out", tmp_path / "e") == 1
    ck = tmp_path / "c.ckpt"
    run("train", "--corpus", corpora["code"], "--out", ck, "--steps", 1, "--batch-size", 2, *TINY)
    assert run("route", "--expert", f"a={ck}", "--expert", f"a={ck}", "--corpus", f"x={corpora['code']}",
               "--out", tmp_path / "r.csv") == 2
    assert "duplicate" in capsys.readouterr().err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "latent_router.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "route" in r.stdout
