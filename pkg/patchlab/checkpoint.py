# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
Versioned little-endian container shared by .ckpt, .trace, .acts and .sae.

    offset  size  field
    0       8     magic, ASCII, one per kind
    8       2     format version, u16 little-endian
    10      4     header length H, u32 little-endian
    14      H     header, UTF-8 YAML mapping
    14+H    ...   tensor payloads, raw little-endian, in header order

The header lists every tensor as {name, shape, dtype} with dtype '<f4' or
'<i4', and carries a sha256 digest over the canonical header (digest field
removed) followed by the payload bytes.
"""

import hashlib
import json
import os
import struct

import numpy as np
import torch
import yaml
from errors import (CheckpointError, DigestMismatchError, ShapeError,
                    TruncatedFileError, UnsupportedFormatError)
from model import Checkpoint, LayerRecord, ModelConfig, Provenance, Trace
from sae import ActivationDataset, SaeConfig, SaeModel

FORMAT_VERSION = 1

MAGIC_CHECKPOINT = b"PLABCKPT"
MAGIC_TRACE = b"PLABTRCE"
MAGIC_ACTS = b"PLABACTS"
MAGIC_SAE = b"PLABSAE\x00"

_PREFIX = struct.Struct("<8sHI")
_DTYPES = {
    "<f4": (np.dtype("<f4"), np.float32, torch.float32),
    "<i4": (np.dtype("<i4"), np.int32, torch.int32),
}


def _payload_bytes(tensor, dtype):
    return np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=_DTYPES[dtype][0]).tobytes()


def _digest(header, payload):
    h = hashlib.sha256()
    h.update(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    h.update(payload)
    return h.hexdigest()


def write_container(path, magic, header, tensors):
    """tensors: list of (name, tensor, dtype) in payload order"""
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(t.shape), "dtype": dt} for n, t, dt in tensors]
    payload = b"".join(_payload_bytes(t, dt) for _, t, dt in tensors)
    header["digest"] = _digest(header, payload)
    raw_header = yaml.safe_dump(header, sort_keys=True).encode("utf-8")

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(magic, FORMAT_VERSION, len(raw_header)))
        f.write(raw_header)
        f.write(payload)
    os.replace(tmp, path)


def read_container(path, magic):
    if not os.path.isfile(path):
        raise CheckpointError(f"file '{path}' does not exist")
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < _PREFIX.size:
        raise TruncatedFileError(f"'{path}' is {len(data)} bytes, shorter than the fixed prefix")
    found, version, header_len = _PREFIX.unpack_from(data, 0)
    if found != magic:
        raise UnsupportedFormatError(f"'{path}' has magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedFormatError(f"'{path}' has format version {version}, this build reads version {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + header_len:
        raise TruncatedFileError(f"'{path}' ends inside its header")
    try:
        header = yaml.safe_load(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as e:
        raise CheckpointError(f"'{path}' has an unreadable header: {e}".replace("\n", " "))
    if not isinstance(header, dict) or "tensors" not in header or "digest" not in header:
        raise CheckpointError(f"'{path}' header lacks tensor table or digest")

    offset = start + header_len
    arrays = {}
    for entry in header["tensors"]:
        if entry["dtype"] not in _DTYPES:
            raise UnsupportedFormatError(f"'{path}' tensor '{entry['name']}' has dtype {entry['dtype']}")
        np_dtype, native, torch_dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        size = count * np_dtype.itemsize
        if len(data) < offset + size:
            raise TruncatedFileError(f"'{path}' ends inside tensor '{entry['name']}'")
        arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = torch.from_numpy(arr.astype(native, copy=True)).to(torch_dtype)
        offset += size
    if offset != len(data):
        raise CheckpointError(f"'{path}' has {len(data) - offset} trailing bytes")

    stored = header.pop("digest")
    if _digest(header, data[start + header_len:]) != stored:
        raise DigestMismatchError(f"'{path}' content does not match its digest")
    return header, arrays


def file_metadata(path):
    """Run metadata stamped into the header of any container kind; {} when none was recorded."""
    if not os.path.isfile(path):
        raise CheckpointError(f"file '{path}' does not exist")
    with open(path, "rb") as f:
        prefix = f.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise TruncatedFileError(f"'{path}' is {len(prefix)} bytes, shorter than the fixed prefix")
    magic = _PREFIX.unpack(prefix)[0]
    if magic not in (MAGIC_CHECKPOINT, MAGIC_TRACE, MAGIC_ACTS, MAGIC_SAE):
        raise UnsupportedFormatError(f"'{path}' has unknown magic {magic!r}")
    header, _ = read_container(path, magic)
    return header.get("metadata") or {}



def save_checkpoint(ckpt, path, vocab=None, metadata=None):
    prov = ckpt.provenance
    header = {
        "kind": "checkpoint",
        "metadata": metadata or {},
        "config": ckpt.config.to_dict(),
        "provenance": {
            "seed": prov.seed,
            "steps": prov.steps,
            "final_loss": prov.final_loss,
            "digest": ckpt.digest,
            "extra": prov.extra,
        },
    }
    if vocab is not None:
        header["vocab"] = vocab.to_list()
    tensors = [(name, ckpt.tensors[name], "<f4") for name, _ in ckpt.config.tensor_shapes()]
    write_container(path, MAGIC_CHECKPOINT, header, tensors)


def load_checkpoint(path):
    header, arrays = read_container(path, MAGIC_CHECKPOINT)
    config = ModelConfig.from_dict(header["config"])
    expected = dict(config.tensor_shapes())
    for name, arr in arrays.items():
        if name in expected and tuple(arr.shape) != expected[name]:
            raise ShapeError(f"'{path}' tensor '{name}' has shape {tuple(arr.shape)}, config requires {expected[name]}")
    p = header["provenance"]
    ckpt = Checkpoint(config, arrays, Provenance(
        seed=p["seed"], steps=p["steps"], final_loss=p["final_loss"], digest=p["digest"], extra=p.get("extra") or {}))
    if ckpt.content_digest() != ckpt.digest:
        raise DigestMismatchError(f"'{path}' tensors do not match the recorded checkpoint digest")
    return ckpt


def load_checkpoint_vocab(path):
    header, _ = read_container(path, MAGIC_CHECKPOINT)
    return header.get("vocab")


_LAYER_FIELDS = ("resid_pre", "attn_pattern", "attn_head_out", "attn_out", "mlp_act", "mlp_out", "resid_post", "resid_scale")


def save_trace(trace, path, omit_head_outputs=False, metadata=None):
    omit = omit_head_outputs or not trace.has_head_outputs
    header = {
        "kind": "trace",
        "config": trace.config.to_dict(),
        "prompt_len": trace.prompt_len,
        "token_count": trace.seq_len,
        "head_outputs_omitted": omit,
        "metadata": metadata or {},
    }
    tensors = [("tokens", torch.tensor(trace.tokens, dtype=torch.int32), "<i4")]
    for layer, rec in enumerate(trace.layers):
        for name in _LAYER_FIELDS:
            if name == "attn_head_out" and omit:
                continue
            tensors.append((f"layers.{layer}.{name}", getattr(rec, name), "<f4"))
    tensors += [
        ("final_norm_scale", trace.final_norm_scale, "<f4"),
        ("logits", trace.logits, "<f4"),
    ]
    write_container(path, MAGIC_TRACE, header, tensors)


class LoadedTrace(object):
    """A Trace read back from disk, with its header."""

    def __init__(self, trace, header):
        self.trace = trace
        self.header = header

    @property
    def head_outputs_omitted(self):
        return bool(self.header["head_outputs_omitted"])


def load_trace_file(path):
    header, arrays = read_container(path, MAGIC_TRACE)
    config = ModelConfig.from_dict(header["config"])
    omitted = bool(header["head_outputs_omitted"])
    try:
        layers = []
        for layer in range(config.n_layers):
            fields = {name: arrays.get(f"layers.{layer}.{name}") for name in _LAYER_FIELDS}
            missing = [n for n, v in fields.items() if v is None and not (n == "attn_head_out" and omitted)]
            if missing:
                raise ShapeError(f"'{path}' layer {layer} lacks {', '.join(missing)}")
            layers.append(LayerRecord(**fields))
        trace = Trace(
            config=config,
            tokens=tuple(int(t) for t in arrays["tokens"].tolist()),
            layers=tuple(layers),
            final_norm_scale=arrays["final_norm_scale"],
            logits=arrays["logits"],
            prompt_len=int(header["prompt_len"]),
        )
    except KeyError as e:
        raise ShapeError(f"'{path}' lacks tensor {e}")
    return LoadedTrace(trace, header)


def load_trace(path):
    return load_trace_file(path).trace


def save_activations(dataset, path, metadata=None):
    header = {
        "kind": "activations",
        "metadata": metadata or {},
        "layer": dataset.layer,
        "site": dataset.site,
        "position": dataset.position,
        "labels": list(dataset.labels),
        "source_digest": dataset.source_digest,
    }
    write_container(path, MAGIC_ACTS, header, [("data", dataset.data, "<f4")])


def load_activations(path):
    header, arrays = read_container(path, MAGIC_ACTS)
    return ActivationDataset(
        data=arrays["data"],
        layer=header["layer"],
        site=header["site"],
        position=header["position"],
        labels=tuple(header["labels"]),
        source_digest=header["source_digest"],
    )


def save_sae(sae, path, metadata=None):
    header = {
        "kind": "sae",
        "metadata": metadata or {},
        "config": sae.config.to_dict(),
        "provenance": sae.provenance,
    }
    tensors = [(name, getattr(sae, name), "<f4") for name in ("w_enc", "b_enc", "w_dec", "b_dec")]
    write_container(path, MAGIC_SAE, header, tensors)


def load_sae(path):
    header, arrays = read_container(path, MAGIC_SAE)
    return SaeModel(SaeConfig.from_dict(header["config"]), arrays["w_enc"], arrays["b_enc"],
                    arrays["w_dec"], arrays["b_dec"], provenance=header["provenance"])
