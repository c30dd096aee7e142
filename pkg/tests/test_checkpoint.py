import json
import struct

import numpy as np
import pytest
import torch

from steerlab.checkpoint import (
    MAGIC,
    CorruptCheckpoint,
    file_sha256,
    load_lm,
    load_sae,
    read_checkpoint,
    save_lm,
    save_sae,
    write_checkpoint,
)
from steerlab.lm.corpus import CorpusConfig, generate_corpus
from steerlab.lm.train import LmTrainConfig, train_toy_lm


def _header(path):
    blob = path.read_bytes()
    (n,) = struct.unpack("<I", blob[8:12])
    return json.loads(blob[12 : 12 + n]), blob[12 + n :], n


def test_lm_round_trip_bit_exact(tmp_path, tiny_lm):
    p = tmp_path / "m.ckpt"
    save_lm(p, tiny_lm, {"note": "x"})
    m, meta, opt = load_lm(p)
    assert meta == {"note": "x"} and opt is None
    assert m.cfg == tiny_lm.cfg
    for (k1, a), (k2, b) in zip(tiny_lm.state_dict().items(), m.state_dict().items()):
        assert k1 == k2 and torch.equal(a, b)


def test_sae_round_trip_bit_exact(tmp_path, tiny_sae):
    p = tmp_path / "s.ckpt"
    save_sae(p, tiny_sae, {"layer": 1})
    s, meta = load_sae(p)
    assert meta == {"layer": 1}
    assert s.lambda_l1 == tiny_sae.lambda_l1
    for a, b in zip(tiny_sae.parameters(), s.parameters()):
        assert torch.equal(a, b)


def test_layout_is_little_endian_row_major(tmp_path):
    t = torch.arange(6, dtype=torch.float64).reshape(2, 3) / 7
    p = tmp_path / "c.ckpt"
    write_checkpoint(p, "test", {"a": 1}, {"w": t, "b": torch.ones(2, dtype=torch.float64)})
    assert p.read_bytes()[:8] == MAGIC
    header, payload, _ = _header(p)
    assert header["schema_version"] == 1 and header["kind"] == "test"
    assert header["dtype"] == "<f8" and header["order"] == "row-major"
    entry = next(e for e in header["tensors"] if e["name"] == "w")
    raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
    assert np.array_equal(np.frombuffer(raw, "<f8").reshape(2, 3), t.numpy())
    assert "green" in header["vocab"]


def test_write_is_deterministic(tmp_path, tiny_lm):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert save_lm(a, tiny_lm) == save_lm(b, tiny_lm)
    assert file_sha256(a) == file_sha256(b) == save_lm(a, tiny_lm)


def test_optimizer_state_round_trip(tmp_path):
    from steerlab.lm.model import LmConfig
    from steerlab.lm.vocab import DEFAULT_VOCAB

    small = LmConfig(vocab_size=len(DEFAULT_VOCAB), d_model=16, n_heads=2, d_mlp=16, context_window=128)
    corpus = generate_corpus(CorpusConfig(n_sequences=50, max_rounds=1), 0)
    cfg = LmTrainConfig(steps=12, eval_every=4)
    full = train_toy_lm(corpus, cfg, small)
    half = train_toy_lm(corpus, LmTrainConfig(steps=6, eval_every=4), small)
    p = tmp_path / "half.ckpt"
    save_lm(p, half.model, {"step": 6}, half.optimizer_state)
    m, meta, opt = load_lm(p)
    rest = train_toy_lm(corpus, cfg, init=m, start_step=meta["step"], optimizer_state=opt)
    assert half.trace + rest.trace == full.trace
    for a, b in zip(full.model.parameters(), rest.model.parameters()):
        assert torch.equal(a, b)


def _corrupt(path, fn):
    blob = bytearray(path.read_bytes())
    path.write_bytes(bytes(fn(blob)))


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"NOTACKPT" + b[8:],
        lambda b: b[:20],
        lambda b: b[:-8],
        lambda b: b[:-1] + bytes([b[-1] ^ 1]),
        lambda b: b[:12] + b"}" + b[13:],
        lambda b: b"",
    ],
    ids=["magic", "header-truncated", "payload-truncated", "bit-flip", "bad-json", "empty"],
)
def test_corruption_detected(tmp_path, tiny_sae, mutate):
    p = tmp_path / "s.ckpt"
    save_sae(p, tiny_sae)
    _corrupt(p, mutate)
    with pytest.raises(CorruptCheckpoint):
        load_sae(p)


def _rewrite_header(path, edit):
    header, payload, _ = _header(path)
    edit(header)
    hb = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(hb)) + hb + payload)


def test_schema_version_checked(tmp_path, tiny_sae):
    p = tmp_path / "s.ckpt"
    save_sae(p, tiny_sae)
    _rewrite_header(p, lambda h: h.update(schema_version=99))
    with pytest.raises(CorruptCheckpoint, match="schema"):
        read_checkpoint(p)


def test_kind_checked(tmp_path, tiny_sae):
    p = tmp_path / "s.ckpt"
    save_sae(p, tiny_sae)
    with pytest.raises(CorruptCheckpoint, match="toy_lm"):
        load_lm(p)


def test_vocab_mismatch(tmp_path, tiny_lm):
    p = tmp_path / "m.ckpt"
    save_lm(p, tiny_lm)
    _rewrite_header(p, lambda h: h["vocab"].reverse())
    with pytest.raises(CorruptCheckpoint, match="vocabulary"):
        load_lm(p)


def test_shape_mismatch(tmp_path, tiny_lm):
    p = tmp_path / "m.ckpt"
    save_lm(p, tiny_lm)
    _rewrite_header(p, lambda h: h["config"].update(d_mlp=64))
    with pytest.raises(CorruptCheckpoint):
        load_lm(p)


def test_tensor_bounds(tmp_path, tiny_sae):
    p = tmp_path / "s.ckpt"
    save_sae(p, tiny_sae)
    _rewrite_header(p, lambda h: h["tensors"][0].update(offset=10**9))
    with pytest.raises(CorruptCheckpoint, match="out of bounds"):
        load_sae(p)
