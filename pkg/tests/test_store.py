import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmcompress import store
from lmcompress.compress import QuantizedTensor, lowrank_factorize, prune_model, quantize_model, tt_compress
from lmcompress.errors import BadMagicError, ChecksumError, StorageError, UnsupportedVersionError
from lmcompress.model import ModelConfig, init_model, model_size_bytes, perplexity

from conftest import tiny_model, tiny_vocab

KINDS = ["dense-rnn", "dense-lstm", "lowrank-lstm", "tt-lstm"]


def variants():
    out = {k: tiny_model(k, k=8, embed=8, n_vocab=11, scale=0.3) for k in KINDS}
    out["quant8"] = quantize_model(out["dense-lstm"])
    out["lowrank-quant8"] = quantize_model(out["lowrank-lstm"])
    return out


@pytest.mark.parametrize("name", list(variants()))
def test_save_load_save_byte_identical(name, tmp_path):
    model = variants()[name]
    n = store.save(model, tmp_path / "a.rnc")
    loaded = store.load(tmp_path / "a.rnc")
    store.save(loaded, tmp_path / "b.rnc")
    a, b = (tmp_path / "a.rnc").read_bytes(), (tmp_path / "b.rnc").read_bytes()
    assert a == b and n == len(a)
    assert loaded.config == model.config and loaded.vocab == model.vocab
    assert [l.kind for l in loaded.layers] == [l.kind for l in model.layers]


@pytest.mark.parametrize("name", list(variants()))
def test_tensor_payloads_round_trip(name):
    model = variants()[name]
    once = store.deserialize(store.serialize(model))
    for k, v in once.named_params().items():
        assert np.array_equal(v, model.named_params()[k].astype(np.float32).astype(np.float64))
    twice = store.deserialize(store.serialize(once))
    for k, v in twice.named_params().items():
        assert np.array_equal(v, once.named_params()[k])
    for k, q in once.quantized.items():
        assert isinstance(q, QuantizedTensor) and q == model.quantized[k]


def test_float64_storage_is_exact():
    model = tiny_model("tt-lstm", k=8, embed=8, n_vocab=11, scale=0.3)
    back = store.deserialize(store.serialize(model, "float64"))
    for k, v in back.named_params().items():
        assert np.array_equal(v, model.named_params()[k])


@pytest.mark.parametrize("name", list(variants()))
def test_perplexity_preserved(name):
    model = variants()[name]
    stream = np.random.default_rng(0).integers(0, 11, size=80)
    exact = store.deserialize(store.serialize(model, "float64"))
    if name.endswith("quant8"):
        assert abs(perplexity(store.deserialize(store.serialize(model)), stream) / perplexity(model, stream) - 1) < 1e-9
    else:
        assert perplexity(exact, stream) == perplexity(model, stream)
        f32 = store.deserialize(store.serialize(model))
        assert perplexity(store.deserialize(store.serialize(f32)), stream) == perplexity(f32, stream)
        assert abs(perplexity(f32, stream) / perplexity(model, stream) - 1) < 1e-6


def test_shared_projection_survives_load():
    model = tiny_model("lowrank-lstm", k=6, layers=3)
    back = store.deserialize(store.serialize(model))
    assert back.layers[1].Wb is back.layers[0].Ub and back.layers[2].Wb is back.layers[1].Ub


def test_layout_header():
    data = store.serialize(tiny_model())
    magic, version, meta_len = struct.unpack_from("<4sIQ", data)
    assert magic == b"RNC1" and version == 1
    assert data[16 : 16 + meta_len].decode("utf-8").startswith("{")


def test_file_size_matches_accounting_small(tmp_path):
    cfg = ModelConfig(2, 200, 200, 10000)
    model = init_model(cfg, seed=0)
    n = store.save(model, tmp_path / "small.rnc")
    assert abs(n / 1e6 / 18.6 - 1) < 0.01
    assert abs(model_size_bytes(model) / n - 1) < 0.01
    nq = store.save(quantize_model(model), tmp_path / "small8.rnc")
    assert abs(nq / 1e6 / 4.7 - 1) < 0.01


def test_empty_model_file_small(tmp_path):
    model = init_model(ModelConfig(0, 1, 4, 3), tiny_vocab(3))
    assert store.save(model, tmp_path / "e.rnc") < 4096
    assert store.load(tmp_path / "e.rnc").layers == []


def test_truncated_file(tmp_path):
    data = store.serialize(tiny_model())
    for cut in (len(data) - 1, len(data) // 2, 17, 10):
        with pytest.raises(ChecksumError):
            store.deserialize(data[:cut])


def test_bad_magic_and_version():
    data = bytearray(store.serialize(tiny_model()))
    with pytest.raises(BadMagicError):
        store.deserialize(b"XXXX" + bytes(data[4:]))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        store.deserialize(bytes(data))


DATA = store.serialize(tiny_model("tt-lstm"))


@settings(max_examples=300, deadline=None)
@given(st.integers(8, len(DATA) - 1), st.integers(1, 255))
def test_single_byte_corruption_detected(pos, flip):
    bad = bytearray(DATA)
    bad[pos] ^= flip
    with pytest.raises(ChecksumError):
        store.deserialize(bytes(bad))


def test_storage_errors(tmp_path):
    with pytest.raises(StorageError):
        store.load(tmp_path / "missing.rnc")
    with pytest.raises(StorageError):
        store.save(tiny_model(), tmp_path / "no" / "such" / "dir.rnc")


def test_atomic_write_leaves_no_temp(tmp_path):
    store.save(tiny_model(), tmp_path / "m.rnc")
    store.save(tiny_model(seed=1), tmp_path / "m.rnc")
    assert [p.name for p in tmp_path.iterdir()] == ["m.rnc"]


def test_masks_round_trip(tmp_path):
    _, mask = prune_model(tiny_model(), 0.5, ("output", "recurrent"))
    store.save_masks(mask, tmp_path / "m.npz")
    back = store.load_masks(tmp_path / "m.npz")
    assert back.sparsity == 0.5 and set(back.masks) == set(mask.masks)
    assert all(np.array_equal(back.masks[k], mask.masks[k]) for k in mask.masks)


def test_compressed_models_round_trip():
    dense = tiny_model(k=8, embed=8, n_vocab=11, scale=0.3)
    for m in (lowrank_factorize(dense, 3), tt_compress(dense, 2, max_ranks=2)):
        data = store.serialize(m)
        assert store.serialize(store.deserialize(data)) == data
