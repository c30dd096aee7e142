"""Versioned checkpoint container for the toy model and the SAE.

Layout: 8 magic bytes, a little-endian uint32 header length, a UTF-8 JSON
header, then the tensor payload.  Tensors are little-endian float64 in
row-major order at the offsets listed in the header; the header also carries
a sha256 of the payload so truncation or bit flips are caught on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .lm.model import LmConfig, ToyLm
from .lm.vocab import DEFAULT_VOCAB
from .sae import SaeModel

MAGIC = b"STLBCKP\x00"
SCHEMA_VERSION = 1


class CorruptCheckpoint(ValueError):
    """Raised for any malformed, truncated or tampered checkpoint file."""


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, torch.Tensor]
    meta: dict
    vocab: list[str]


def _tensor_bytes(t) -> bytes:
    a = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_checkpoint(path, kind: str, config: dict, tensors: dict, meta: Optional[dict] = None,
                     vocab: Optional[list[str]] = None) -> str:
    """Write a container and return the sha256 of the whole file."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        raw = _tensor_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": config,
        "vocab": list(vocab if vocab is not None else DEFAULT_VOCAB.tokens),
        "dtype": "<f8",
        "order": "row-major",
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<I", len(hb)) + hb + payload
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_checkpoint(path, kind: Optional[str] = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a steerlab checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise CorruptCheckpoint(f"{path}: header truncated")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: header is not valid JSON") from exc
    if not isinstance(header, dict) or header.get("schema_version") != SCHEMA_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported schema version {header.get('schema_version') if isinstance(header, dict) else None}")
    for key in ("kind", "config", "vocab", "tensors", "payload_sha256"):
        if key not in header:
            raise CorruptCheckpoint(f"{path}: header missing {key!r}")
    if kind is not None and header["kind"] != kind:
        raise CorruptCheckpoint(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
    payload = blob[12 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpoint(f"{path}: payload digest mismatch")
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 8 * n or e["offset"] + e["nbytes"] > len(payload):
            raise CorruptCheckpoint(f"{path}: tensor {e['name']} out of bounds")
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(a.astype(np.float64))
    return Checkpoint(header["kind"], header["config"], tensors, header.get("meta", {}), header["vocab"])


def _optimizer_tensors(state: Optional[dict]) -> tuple[dict, Optional[dict]]:
    """Split a torch optimizer state dict into float64 tensors and JSON metadata."""
    if state is None:
        return {}, None
    tensors, steps = {}, {}
    for idx, st in state["state"].items():
        for key, val in st.items():
            if key == "step":
                steps[str(idx)] = float(val)
            else:
                tensors[f"optim.{idx}.{key}"] = val
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in state["param_groups"]]
    return tensors, {"param_groups": groups, "steps": steps}


def _optimizer_state(ck: Checkpoint) -> Optional[dict]:
    info = ck.meta.get("optimizer")
    if info is None:
        return None
    state: dict = {}
    for name, t in ck.tensors.items():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = t.clone()
    for idx, step in info["steps"].items():
        state.setdefault(int(idx), {})["step"] = torch.tensor(step, dtype=torch.float32)
    groups = []
    for g in info["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    return {"state": state, "param_groups": groups}


def save_lm(path, m: ToyLm, meta: Optional[dict] = None, optimizer_state: Optional[dict] = None) -> str:
    tensors = {f"param.{k}": v for k, v in m.state_dict().items()}
    opt_tensors, opt_meta = _optimizer_tensors(optimizer_state)
    tensors.update(opt_tensors)
    meta = dict(meta or {})
    if opt_meta is not None:
        meta["optimizer"] = opt_meta
    return write_checkpoint(path, "toy_lm", m.cfg.to_dict(), tensors, meta)


def load_lm(path) -> tuple[ToyLm, dict, Optional[dict]]:
    """(model, meta, optimizer_state) from a toy-model checkpoint."""
    ck = read_checkpoint(path, "toy_lm")
    if ck.vocab != list(DEFAULT_VOCAB.tokens):
        raise CorruptCheckpoint(f"{path}: vocabulary does not match this build")
    try:
        m = ToyLm(LmConfig(**ck.config))
        params = {k[len("param."):]: v for k, v in ck.tensors.items() if k.startswith("param.")}
        m.load_state_dict(params, strict=True)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise CorruptCheckpoint(f"{path}: inconsistent model tensors ({exc})") from exc
    return m, ck.meta, _optimizer_state(ck)


def save_sae(path, s: SaeModel, meta: Optional[dict] = None) -> str:
    config = {"d_in": s.d_in, "d_latent": s.d_latent, "lambda_l1": s.lambda_l1}
    tensors = {"W_enc": s.W_enc, "b_enc": s.b_enc, "W_dec": s.W_dec, "b_dec": s.b_dec}
    return write_checkpoint(path, "sae", config, tensors, meta)


def load_sae(path) -> tuple[SaeModel, dict]:
    ck = read_checkpoint(path, "sae")
    try:
        t = ck.tensors
        s = SaeModel.from_arrays(t["W_enc"], t["b_enc"], t["W_dec"], t["b_dec"], ck.config["lambda_l1"])
    except (KeyError, ValueError, RuntimeError) as exc:
        raise CorruptCheckpoint(f"{path}: inconsistent SAE tensors ({exc})") from exc
    if (s.d_in, s.d_latent) != (ck.config["d_in"], ck.config["d_latent"]):
        raise CorruptCheckpoint(f"{path}: SAE shapes disagree with header")
    return s, ck.meta


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

