"""Self-describing checkpoint files.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header
(kind, configs, vocabulary, tensor table), then raw little-endian tensor bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .bert import BertConfig, RRABert
from .gpt import GptConfig, RRAGpt, SpecialTokens, RELEVANT, IRRELEVANT, RESPONSE, REASON
from .nn import ModelConfig
from .text import Vocabulary

MAGIC = b"RKDCKPT1"
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


class CheckpointError(ValueError):
    pass


class KindMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def save_checkpoint(model: RRABert | RRAGpt, path: str | Path, extra: dict | None = None) -> None:
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        code = _DTYPES.get(t.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": model.kind,
        "model_config": model.config.to_dict(),
        "ranker_config": model.ranker_config(),
        "vocab": model.vocab.to_dict(),
        "tensors": tensors,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def read_header(path: str | Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated length field at offset 8")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise CheckpointError(f"{path}: header of {n} bytes runs past end of file ({len(data)} bytes) at offset 16")
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header at offset 16: {exc}") from exc
    return header, data[16 + n:]


def load_checkpoint(path: str | Path, kind: str | None = None,
                    expected_config: ModelConfig | None = None) -> RRABert | RRAGpt:
    header, body = read_header(path)
    if kind is not None and header["kind"] != kind:
        raise KindMismatchError(f"{path}: checkpoint kind {header['kind']!r}, expected {kind!r}")
    config = ModelConfig(**header["model_config"])
    if expected_config is not None and expected_config != config:
        raise ConfigMismatchError(f"{path}: model config {config} differs from expected {expected_config}")
    vocab = Vocabulary.from_dict(header["vocab"])
    rc = dict(header["ranker_config"])
    if header["kind"] == RRABert.kind:
        model = RRABert(vocab, config, BertConfig(**rc))
    elif header["kind"] == RRAGpt.kind:
        registered = rc.pop("special_registered", False)
        rc["tasks"] = tuple(rc["tasks"])
        model = RRAGpt(vocab, config, GptConfig(**rc))
        if registered:
            sid = vocab.special_ids
            model.special = SpecialTokens(sid[RELEVANT], sid[IRRELEVANT], sid[RESPONSE], sid[REASON])
    else:
        raise KindMismatchError(f"{path}: unknown model kind {header['kind']!r}")
    state = {}
    for entry in header["tensors"]:
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: tensor {entry['name']} at body offset {start} "
                                  f"runs past end of data ({len(body)} bytes)")
        arr = np.frombuffer(body[start:end], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")).copy())
    if any(t.dtype == torch.float64 for t in state.values()):
        model.double()
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigMismatchError(f"{path}: tensors do not fit the stored config: {exc}") from exc
    model.eval()
    return model
