import json
import re
import subprocess
import sys

import numpy as np
import pytest

from lmcompress import store
from lmcompress.cli import main, read_config_file, resolve_config
from lmcompress.corpus import split_corpus, synthetic_corpus
from lmcompress.model import ModelConfig, init_model

from conftest import tiny_vocab


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def strip_seconds(text):
    return re.sub(r" seconds=\S+", "", text)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    tr, va, te = split_corpus(synthetic_corpus(50_000, seed=5))
    for name, text in (("train", tr), ("valid", va), ("test", te)):
        (d / f"{name}.txt").write_text(text)
    (d / "tiny.cfg").write_text("# tiny run\nhidden = 64\nlayers = 2\nepochs = 10\nbatch_size = 10\nunroll = 20\n"
                                "lr = 0.002\ninit_scale = 0.1\n")
    return d


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    runs = []
    for tag in ("a", "b"):
        code = main(["train", "--config", str(corpus / "tiny.cfg"), "--corpus", str(corpus / "train.txt"),
                     "--valid", str(corpus / "valid.txt"), "--out", str(out / f"{tag}.rnc")])
        assert code == 0
        runs.append(out / f"{tag}.rnc")
    return runs


def test_build_vocab(capsys, tmp_path):
    words = [f"t{i}" for i in range(12000)]
    (tmp_path / "big.txt").write_text("\n".join(" ".join(words[i : i + 20]) for i in range(0, 12000, 20)) + "\n")
    code, out, _ = run(capsys, "build-vocab", "--corpus", tmp_path / "big.txt", "--max-size", 10000, "--out", tmp_path / "v1")
    assert code == 0 and "vocab_size=10000" in out
    assert (tmp_path / "v1").read_text().count("\n") == 10000
    run(capsys, "build-vocab", "--corpus", tmp_path / "big.txt", "--max-size", 10000, "--out", tmp_path / "v2")
    assert (tmp_path / "v1").read_bytes() == (tmp_path / "v2").read_bytes()


def test_build_vocab_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "build-vocab", "--corpus", tmp_path / "absent.txt", "--out", tmp_path / "v")
    assert code == 2 and "absent.txt" in err


def test_train_report_and_determinism(trained, corpus, capsys):
    a, b = trained
    report_a = (a.parent / "a.rnc.report").read_text()
    lines = report_a.splitlines()
    assert len(lines) == 10 and all(l.startswith(f"epoch={i + 1} ") for i, l in enumerate(lines))
    model = store.load(a)
    final = float(re.search(r"valid_pp=(\S+)", lines[-1]).group(1))
    assert final < model.n_vocab
    assert a.read_bytes() == b.read_bytes()
    assert strip_seconds(report_a) == strip_seconds((b.parent / "b.rnc.report").read_text())


def test_train_echoes_config_and_flags_override(corpus, capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--config", corpus / "tiny.cfg", "--corpus", corpus / "train.txt",
                       "--valid", corpus / "valid.txt", "--out", tmp_path / "m.rnc",
                       "--hidden", 8, "--epochs", 2, "--lr", 0)
    assert code == 0
    assert "config hidden=8" in out and "config epochs=2" in out and "config layers=2" in out
    assert "config lr=0.0" in out and "config seed=0" in out
    pps = re.findall(r"valid_pp=(\S+)", out)
    assert len(pps) == 2 and abs(float(pps[0]) - float(pps[1])) <= 1e-9 * float(pps[0])


def test_config_file_parsing(tmp_path):
    (tmp_path / "c").write_text("hidden=12\n  lr = 0.5 # comment\n")
    eff = resolve_config(read_config_file(tmp_path / "c"), {"hidden": "20"})
    assert eff["hidden"] == 20 and eff["lr"] == 0.5 and eff["embed_dim"] == 20
    (tmp_path / "bad").write_text("colour = red\n")
    from lmcompress.cli import UsageError

    with pytest.raises(UsageError):
        read_config_file(tmp_path / "bad")


def test_train_bad_config_key_exits_2(corpus, capsys, tmp_path):
    (tmp_path / "bad.cfg").write_text("colour = red\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--corpus", corpus / "train.txt",
                       "--valid", corpus / "valid.txt", "--out", tmp_path / "m.rnc")
    assert code == 2 and "colour" in err


def test_train_divergence_exits_3(corpus, capsys, tmp_path):
    code, _, err = run(capsys, "train", "--corpus", corpus / "train.txt", "--valid", corpus / "valid.txt",
                       "--out", tmp_path / "m.rnc", "--hidden", 8, "--layers", 1, "--lr", 50, "--clip", 1e6,
                       "--epochs", 6, "--batch-size", 10, "--unroll", 20)
    assert code == 3 and "3x initial" in err
    assert not (tmp_path / "m.rnc").exists()


def test_prune_mask_retrain(trained, corpus, capsys, tmp_path):
    code, out, _ = run(capsys, "compress", "prune", "--model", trained[0], "--out", tmp_path / "p.rnc",
                       "--sparsity", 0.9, "--layers", "output", "--mask-out", tmp_path / "mask.npz",
                       "--eval", corpus / "valid.txt", "--json", tmp_path / "r.json")
    assert code == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["after_pp"] > rep["before_pp"]
    code, _, _ = run(capsys, "train", "--init", tmp_path / "p.rnc", "--mask", tmp_path / "mask.npz",
                     "--corpus", corpus / "train.txt", "--valid", corpus / "valid.txt", "--out", tmp_path / "r.rnc",
                     "--epochs", 1, "--batch-size", 10, "--unroll", 20)
    assert code == 0
    before = store.load(tmp_path / "p.rnc").softmax_w == 0
    after = store.load(tmp_path / "r.rnc").softmax_w == 0
    assert np.array_equal(before, after)


@pytest.mark.parametrize("argv", [
    ["prune", "--sparsity", "1.5"],
    ["prune", "--sparsity", "0.5", "--layers", "bias"],
    ["lowrank", "--rank", "0"],
    ["lowrank", "--rank", "65"],
    ["tt", "--tt-dims", "4"],
])
def test_invalid_pass_parameters_exit_2(argv, trained, capsys, tmp_path):
    code, _, err = run(capsys, "compress", argv[0], "--model", trained[0], "--out", tmp_path / "x.rnc", *argv[1:])
    assert code == 2 and err.startswith("error:")


def test_quantize_small_ratio(capsys, tmp_path):
    store.save(init_model(ModelConfig(2, 200, 200, 10000), seed=0), tmp_path / "small.rnc")
    code, out, _ = run(capsys, "compress", "quantize", "--model", tmp_path / "small.rnc", "--out", tmp_path / "q.rnc")
    assert code == 0
    ratio = float(re.search(r"ratio=(\S+)", out).group(1))
    assert abs(ratio - 3.96) < 0.05
    code, out, _ = run(capsys, "info", "--model", tmp_path / "small.rnc")
    params = int(re.search(r"params=(\d+)", out).group(1))
    nbytes = int(re.search(r" bytes=(\d+)", out).group(1))
    assert abs(params / 4.64e6 - 1) < 0.01 and abs(nbytes / 18.6e6 - 1) < 0.01
    assert "tensor softmax.W shape=10000x200" in out


def test_lowrank_pass_medium_params(capsys, tmp_path):
    store.save(init_model(ModelConfig(2, 650, 650, 10000), seed=0), tmp_path / "med.rnc")
    code, out, _ = run(capsys, "compress", "lowrank", "--model", tmp_path / "med.rnc", "--out", tmp_path / "lr.rnc",
                       "--rank", 128)
    assert code == 0
    after = int(re.search(r"after_params=(\d+)", out).group(1))
    assert 4.0e6 <= after <= 4.4e6


def test_tt_near_identity_and_evaluate(trained, corpus, capsys, tmp_path):
    code, out, _ = run(capsys, "compress", "tt", "--model", trained[0], "--out", tmp_path / "tt.rnc",
                       "--tt-dims", 4, "--tt-eps", 1e-8, "--eval", corpus / "test.txt")
    assert code == 0
    before = float(re.search(r"before_pp=(\S+)", out).group(1))
    after = float(re.search(r"after_pp=(\S+)", out).group(1))
    assert abs(after / before - 1) < 0.01
    _, dense_out, _ = run(capsys, "evaluate", "--model", trained[0], "--eval", corpus / "test.txt")
    _, tt_out, _ = run(capsys, "evaluate", "--model", tmp_path / "tt.rnc", "--eval", corpus / "test.txt")
    assert dense_out == tt_out and re.fullmatch(r"perplexity=\d+\.\d{3}\n", dense_out)


def test_evaluate_uniform_and_chunking(capsys, tmp_path):
    V = 50
    model = init_model(ModelConfig(1, 8, 8, V, init_scale=0.01), tiny_vocab(V), seed=0)
    store.save(model, tmp_path / "u.rnc")
    rng = np.random.default_rng(0)
    text = "\n".join(" ".join(f"w{i}" for i in rng.integers(0, V - 2, size=15)) for _ in range(20)) + "\n"
    (tmp_path / "e.txt").write_text(text)
    code, out, _ = run(capsys, "evaluate", "--model", tmp_path / "u.rnc", "--eval", tmp_path / "e.txt",
                       "--json", tmp_path / "a.json")
    assert code == 0
    pp = float(out.split("=")[1])
    assert abs(pp / V - 1) < 0.05
    run(capsys, "evaluate", "--model", tmp_path / "u.rnc", "--eval", tmp_path / "e.txt", "--steps", 7,
        "--json", tmp_path / "b.json")
    a = json.loads((tmp_path / "a.json").read_text())["perplexity"]
    b = json.loads((tmp_path / "b.json").read_text())["perplexity"]
    assert abs(a - b) <= 1e-9 * a


def test_evaluate_vocab_mismatch_exits_2(trained, corpus, capsys, tmp_path):
    tiny_vocab(5).save(tmp_path / "v.txt")
    code, _, err = run(capsys, "evaluate", "--model", trained[0], "--eval", corpus / "test.txt", "--vocab", tmp_path / "v.txt")
    assert code == 2 and "vocabulary" in err


def test_info_unreadable_exits_2(capsys, tmp_path):
    (tmp_path / "junk.rnc").write_bytes(b"not a model")
    code, _, err = run(capsys, "info", "--model", tmp_path / "junk.rnc")
    assert code == 2 and "magic" in err
    code, _, _ = run(capsys, "info", "--model", tmp_path / "absent.rnc")
    assert code == 2


def test_info_reports_sparsity(trained, capsys, tmp_path):
    run(capsys, "compress", "prune", "--model", trained[0], "--out", tmp_path / "p.rnc", "--sparsity", 0.9)
    code, out, _ = run(capsys, "info", "--model", tmp_path / "p.rnc")
    assert code == 0 and "layer_kind=dense-lstm" in out
    assert re.search(r"tensor softmax.W .* sparsity=0\.9000", out)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lmcompress", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "build-vocab" in res.stdout
    res = subprocess.run([sys.executable, "-m", "lmcompress", "compress"], capture_output=True, text=True)
    assert res.returncode == 2
