"""Binary checkpoints with a fixed, versioned byte layout.

Layout (all integers little-endian):

    magic   4 bytes  b"GSEL"
    version u32      currently 1
    hlen    u32      length of the header JSON
    header  hlen bytes of UTF-8 JSON with sorted keys:
                     {"config": {...}, "extra": {...}, "format": 1,
                      "optimizer": null | {hyperparameters + step_count}}
    count   u32      number of tensor records
    record  repeated: name_len u32, name UTF-8 bytes,
                      dtype u8 (0 = float32, 1 = float64), rank u8,
                      dims rank * u64, data row-major little-endian floats

Model tensors appear in ModelParams.named() order; optimiser moments follow
as opt.m.<name> and opt.v.<name>.  Saving writes to a temporary file in the
same directory and renames over the target, and a save -> load -> save
round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct

import numpy as np

from .autodiff import DOUBLE, SINGLE, Tensor
from .model import ModelConfig, ModelParams
from .nn import AdamW, BlockParams, LinearParams

MAGIC = b"GSEL"
VERSION = 1

_DTYPE_CODE = {np.dtype(SINGLE): 0, np.dtype(DOUBLE): 1}
_CODE_DTYPE = {0: "<f4", 1: "<f8"}


class CheckpointError(ValueError):
    """Malformed checkpoint bytes or a structure/config mismatch."""


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    code = _DTYPE_CODE.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<BB", code, arr.ndim)]
    for dim in arr.shape:
        parts.append(struct.pack("<Q", dim))
    parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPE[code]).tobytes())
    return b"".join(parts)


def _optimizer_header(opt: AdamW | None) -> dict | None:
    if opt is None:
        return None
    return {
        "lr": opt.lr,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "weight_decay": opt.weight_decay,
        "step_count": opt.step_count,
    }


def save_checkpoint(path: str, params: ModelParams, config: ModelConfig,
                    optimizer: AdamW | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "config": dataclasses.asdict(config),
        "extra": extra or {},
        "format": VERSION,
        "optimizer": _optimizer_header(optimizer),
    }
    header["config"]["fs_layers"] = list(config.fs_layers)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    records = [(name, t.data) for name, t in params.named()]
    if optimizer is not None:
        for prefix, table in (("opt.m.", optimizer.m), ("opt.v.", optimizer.v)):
            for name, _ in params.named():
                if name in table:
                    records.append((prefix + name, table[name]))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            f.write(_pack_tensor(name, arr))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def _read_records(reader: _Reader) -> dict[str, np.ndarray]:
    count = reader.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        code = reader.u8()
        if code not in _CODE_DTYPE:
            raise CheckpointError(f"{reader.path}: bad dtype code {code} for {name}")
        rank = reader.u8()
        shape = tuple(reader.u64() for _ in range(rank))
        n = 1
        for dim in shape:
            n *= dim
        itemsize = 4 if code == 0 else 8
        data = np.frombuffer(reader.take(n * itemsize), dtype=_CODE_DTYPE[code])
        if name in arrays:
            raise CheckpointError(f"{reader.path}: duplicate tensor {name}")
        arrays[name] = data.reshape(shape).copy()
    if reader.pos != len(reader.blob):
        raise CheckpointError(f"{reader.path}: trailing bytes after tensor table")
    return arrays


def _take_tensor(arrays: dict[str, np.ndarray], name: str,
                 shape: tuple[int, ...], dtype, path: str) -> Tensor:
    arr = arrays.pop(name, None)
    if arr is None:
        raise CheckpointError(f"{path}: missing tensor {name}")
    if arr.shape != shape:
        raise CheckpointError(
            f"{path}: tensor {name} has shape {arr.shape}, config implies {shape}"
        )
    if arr.dtype != np.dtype(dtype):
        raise CheckpointError(
            f"{path}: tensor {name} dtype {arr.dtype} does not match config "
            f"precision"
        )
    return Tensor(arr)


def _params_from_arrays(arrays: dict[str, np.ndarray], config: ModelConfig,
                        path: str) -> ModelParams:
    d = config.embed_dim
    dt = config.dtype

    def lin(prefix: str, d_in: int, d_out: int) -> LinearParams:
        return LinearParams(
            weight=_take_tensor(arrays, prefix + ".weight", (d_in, d_out), dt, path),
            bias=_take_tensor(arrays, prefix + ".bias", (1, d_out), dt, path),
        )

    def norm(name: str) -> Tensor:
        return _take_tensor(arrays, name, (1, d), dt, path)

    patch_proj = lin("patch_proj", config.patch_features, d)
    patch_pos = _take_tensor(arrays, "patch_pos", (config.n_patches, d), dt, path)
    text_table = _take_tensor(arrays, "text_table", (config.vocab_size, d), dt, path)
    text_pos = _take_tensor(arrays, "text_pos", (config.max_text_len, d), dt, path)
    register = _take_tensor(arrays, "register", (1, d), dt, path)
    blocks = []
    for i in range(1, config.depth + 1):
        p = f"block{i}."
        blocks.append(
            BlockParams(
                norm1_gamma=norm(p + "norm1_gamma"),
                norm1_beta=norm(p + "norm1_beta"),
                q=lin(p + "q", d, d),
                k=lin(p + "k", d, d),
                v=lin(p + "v", d, d),
                o=lin(p + "o", d, d),
                norm2_gamma=norm(p + "norm2_gamma"),
                norm2_beta=norm(p + "norm2_beta"),
                ffn1=lin(p + "ffn1", d, config.ffn_mult * d),
                ffn2=lin(p + "ffn2", config.ffn_mult * d, d),
            )
        )
    return ModelParams(
        patch_proj=patch_proj,
        patch_pos=patch_pos,
        text_table=text_table,
        text_pos=text_pos,
        register=register,
        blocks=blocks,
        final_gamma=norm("final_gamma"),
        final_beta=norm("final_beta"),
        head1=lin("head1", d, config.head_hidden),
        head2=lin("head2", config.head_hidden, config.head_hidden),
        head3=lin("head3", config.head_hidden, 4),
    )


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig, AdamW | None, dict]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    reader = _Reader(blob, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    cfg_dict = dict(header["config"])
    cfg_dict["fs_layers"] = tuple(cfg_dict["fs_layers"])
    config = ModelConfig(**cfg_dict)
    arrays = _read_records(reader)
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    for k in opt_arrays:
        del arrays[k]
    params = _params_from_arrays(arrays, config, path)
    if arrays:
        raise CheckpointError(
            f"{path}: unexpected tensors {sorted(arrays)[:3]}"
        )
    optimizer = None
    opt_header = header.get("optimizer")
    if opt_header is not None:
        optimizer = AdamW(
            lr=opt_header["lr"],
            beta1=opt_header["beta1"],
            beta2=opt_header["beta2"],
            eps=opt_header["eps"],
            weight_decay=opt_header["weight_decay"],
            step_count=opt_header["step_count"],
        )
        for full, arr in opt_arrays.items():
            if full.startswith("opt.m."):
                optimizer.m[full[len("opt.m.") :]] = arr
            elif full.startswith("opt.v."):
                optimizer.v[full[len("opt.v.") :]] = arr
            else:
                raise CheckpointError(f"{path}: unexpected tensor {full}")
    elif opt_arrays:
        raise CheckpointError(f"{path}: optimiser tensors without header entry")
    return params, config, optimizer, header.get("extra", {})
