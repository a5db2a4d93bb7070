"""Post-training binarization, checkpoints, and storage accounting.

Checkpoint format (extension .bmb, all little-endian):

    magic   b"BMB1"
    version u32
    config  u32 byte length + UTF-8 "key=value" lines
    dir     u32 entry count, then per tensor:
              u16 name length + UTF-8 name
              u8  dtype tag (0 fp32, 1 packed sign bits, 2 scale, 3 shift)
              u8  rank, then rank x u64 extents
              u64 payload byte length
              u64 absolute payload offset (64-byte aligned)
    crc32   u32 over every header byte above
    payload tensors at their recorded offsets

The reader validates magic, version, CRC, and every directory entry
(bounds, alignment, extent/length consistency) before touching payload
bytes, and raises CheckpointError with a reason on any mismatch.  Writes
are deterministic: the same model produces byte-identical files.
"""

from __future__ import annotations

import dataclasses
import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .fbi import DenseLinearParams, FbiLinearParams, PackedMatrix, pack_params
from .model import (
    BiMambaModel,
    InferenceModel,
    ModelConfig,
    init_model,
    named_parameters,
    param_census,
    total_params,
)
from .ssd import SsdBlockParams
from .tensor import Tensor

MAGIC = b"BMB1"
VERSION = 1
ALIGN = 64
TAG_FP32, TAG_BITS, TAG_ALPHA, TAG_BETA = 0, 1, 2, 3
BASELINE_BYTES_PER_PARAM = 2  # half-precision reference deployment


class CheckpointError(Exception):
    pass


# === post-training binarization ===


def ptb_binarize(model: BiMambaModel, scope: str = "full") -> BiMambaModel:
    """Closed-form binarization of a trained full-precision model.

    Per column: scale = mean |w|, shift = mean w — the least-squares fit
    of (scale * sign(w) + shift) to w when the column's signs balance.
    The input model is left untouched.
    """
    if model.config.scope != "none":
        raise ValueError("ptb_binarize expects a full-precision model (scope='none')")
    cfg = dataclasses.replace(model.config, scope=scope)
    scope_in, scope_out = cfg.scope_flags()

    def convert(layer: DenseLinearParams, binarize: bool):
        if binarize:
            return FbiLinearParams.from_latent(layer.weight.data.copy())
        return DenseLinearParams(weight=_clone(layer.weight))

    layers = [
        dataclasses.replace(
            blk,
            in_proj=convert(blk.in_proj, scope_in),
            out_proj=convert(blk.out_proj, scope_out),
            conv_weight=_clone(blk.conv_weight),
            conv_bias=_clone(blk.conv_bias),
            dt_bias=_clone(blk.dt_bias),
            A_log=_clone(blk.A_log),
            D=_clone(blk.D),
            norm_weight=_clone(blk.norm_weight),
        )
        for blk in model.layers
    ]
    return BiMambaModel(
        config=cfg,
        embedding=_clone(model.embedding),
        pre_norms=[_clone(w) for w in model.pre_norms],
        layers=layers,
        final_norm=_clone(model.final_norm),
    )


def _clone(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=t.requires_grad)


# === config text block ===

_CONFIG_KEYS = ("d_model", "n_layer", "vocab_size", "n_heads", "d_state", "d_conv", "expand", "scope", "census_vocab")


def _config_to_text(cfg: ModelConfig) -> str:
    vals = {k: getattr(cfg, k) for k in _CONFIG_KEYS}
    vals["census_vocab"] = "none" if cfg.census_vocab is None else cfg.census_vocab
    return "".join(f"{k}={vals[k]}\n" for k in _CONFIG_KEYS)


def _config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}")
        k, v = line.split("=", 1)
        kv[k] = v
    missing = set(_CONFIG_KEYS) - set(kv)
    if missing:
        raise CheckpointError(f"config block missing keys {sorted(missing)}")
    try:
        return ModelConfig(
            d_model=int(kv["d_model"]),
            n_layer=int(kv["n_layer"]),
            vocab_size=int(kv["vocab_size"]),
            n_heads=int(kv["n_heads"]),
            d_state=int(kv["d_state"]),
            d_conv=int(kv["d_conv"]),
            expand=int(kv["expand"]),
            scope=kv["scope"],
            census_vocab=None if kv["census_vocab"] == "none" else int(kv["census_vocab"]),
        )
    except ValueError as e:
        raise CheckpointError(f"invalid config block: {e}") from e


# === low-level write/read ===


def _dtype_for(tag: int) -> np.dtype:
    if tag == TAG_BITS:
        return np.dtype("<u8")
    if tag in (TAG_FP32, TAG_ALPHA, TAG_BETA):
        return np.dtype("<f4")
    raise CheckpointError(f"unknown dtype tag {tag}")


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_checkpoint(path: str, cfg: ModelConfig, entries: list[tuple[str, int, np.ndarray]]) -> None:
    cfg_b = _config_to_text(cfg).encode("utf-8")
    arrays = [np.ascontiguousarray(arr, dtype=_dtype_for(tag)) for _, tag, arr in entries]

    dir_size = 4 + sum(2 + len(name.encode()) + 1 + 1 + 8 * arr.ndim + 8 + 8 for (name, _, _), arr in zip(entries, arrays))
    header_size = len(MAGIC) + 4 + 4 + len(cfg_b) + dir_size + 4  # + crc
    cursor = _align(header_size)
    offsets = []
    for arr in arrays:
        offsets.append(cursor)
        cursor = _align(cursor + arr.nbytes)

    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<I", len(cfg_b)) + cfg_b
    header += struct.pack("<I", len(entries))
    for (name, tag, _), arr, off in zip(entries, arrays, offsets):
        nb = name.encode("utf-8")
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<BB", tag, arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        header += struct.pack("<QQ", arr.nbytes, off)
    header += struct.pack("<I", zlib.crc32(bytes(header)))
    assert len(header) == header_size

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(b"\0" * (offsets[0] - len(header) if offsets else 0))
        pos = offsets[0] if offsets else len(header)
        for arr, off in zip(arrays, offsets):
            f.write(b"\0" * (off - pos))
            f.write(arr.tobytes())
            pos = off + arr.nbytes
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated header: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str) -> tuple[ModelConfig, dict[str, tuple[int, np.ndarray]]]:
    """Parse and fully validate a checkpoint; payload is copied out."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e

    cur = _Cursor(buf)
    try:
        if cur.take(len(MAGIC)) != MAGIC:
            raise CheckpointError("bad magic: not a model checkpoint")
        (version,) = cur.unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported version {version}")
        (cfg_len,) = cur.unpack("<I")
        cfg_text = cur.take(cfg_len).decode("utf-8") if cfg_len else ""
        (count,) = cur.unpack("<I")
        if count > 1_000_000:
            raise CheckpointError(f"implausible tensor count {count}")
        raw_entries = []
        for _ in range(count):
            (name_len,) = cur.unpack("<H")
            name = cur.take(name_len).decode("utf-8")
            tag, rank = cur.unpack("<BB")
            if rank > 8:
                raise CheckpointError(f"implausible rank {rank} for {name!r}")
            extents = cur.unpack(f"<{rank}Q") if rank else ()
            length, offset = cur.unpack("<QQ")
            raw_entries.append((name, tag, extents, length, offset))
    except UnicodeDecodeError as e:
        raise CheckpointError(f"undecodable header text: {e}") from e
    header_end = cur.pos
    (stored_crc,) = cur.unpack("<I")
    if zlib.crc32(buf[:header_end]) != stored_crc:
        raise CheckpointError("header checksum mismatch")

    tensors: dict[str, tuple[int, np.ndarray]] = {}
    for name, tag, extents, length, offset in raw_entries:
        dt = _dtype_for(tag)
        n_items = math.prod(extents)
        if length != n_items * dt.itemsize:
            raise CheckpointError(f"{name!r}: payload length {length} does not match extents {extents}")
        if offset % ALIGN or offset < header_end or offset + length > len(buf):
            raise CheckpointError(f"{name!r}: payload range [{offset}, {offset + length}) invalid")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        arr = np.frombuffer(buf, dtype=dt, count=n_items, offset=offset).reshape(extents).copy()
        tensors[name] = (tag, arr)
    return _config_from_text(cfg_text), tensors


# === model-level save/load ===


def save_model(path: str, model: BiMambaModel) -> None:
    """Training checkpoint: every named parameter in full precision."""
    entries = []
    for name, t in named_parameters(model):
        tag = TAG_ALPHA if name.endswith(".alpha") else TAG_BETA if name.endswith(".beta") else TAG_FP32
        entries.append((name, tag, t.data))
    write_checkpoint(path, model.config, entries)


def load_model(path: str) -> BiMambaModel:
    cfg, tensors = read_checkpoint(path)
    if any(tag == TAG_BITS for tag, _ in tensors.values()):
        raise CheckpointError(
            "packed deployment file: bit planes carry no trainable latent "
            "weights; pass a teacher/student/ptb checkpoint instead"
        )
    model = init_model(cfg, seed=0)
    expected = dict(named_parameters(model))
    if set(expected) != set(tensors):
        extra = sorted(set(tensors) - set(expected))[:3]
        missing = sorted(set(expected) - set(tensors))[:3]
        raise CheckpointError(f"tensor names do not match config (missing {missing}, extra {extra})")
    for name, (tag, arr) in tensors.items():
        if arr.shape != expected[name].data.shape:
            raise CheckpointError(f"{name!r}: shape {arr.shape} does not match config {expected[name].data.shape}")
        expected[name].data = arr.astype(expected[name].data.dtype)
    return model


def save_packed(path: str, inf: InferenceModel) -> None:
    """Deployment checkpoint: binarized projections as packed sign bits."""
    entries: list[tuple[str, int, np.ndarray]] = [("embedding", TAG_FP32, inf.embedding)]
    for i, (pre, blk) in enumerate(zip(inf.pre_norms, inf.layers)):
        pfx = f"layers.{i}."
        entries.append((pfx + "pre_norm", TAG_FP32, pre))
        for role, layer in (("in_proj", blk.in_proj), ("out_proj", blk.out_proj)):
            if isinstance(layer, PackedMatrix):
                entries.append((pfx + role + ".bits", TAG_BITS, layer.words))
                entries.append((pfx + role + ".alpha", TAG_ALPHA, layer.alpha))
                entries.append((pfx + role + ".beta", TAG_BETA, layer.beta))
            else:
                entries.append((pfx + role + ".weight", TAG_FP32, layer))
        entries.append((pfx + "conv_weight", TAG_FP32, blk.conv_weight.data))
        entries.append((pfx + "conv_bias", TAG_FP32, blk.conv_bias.data))
        entries.append((pfx + "dt_bias", TAG_FP32, blk.dt_bias.data))
        entries.append((pfx + "A_log", TAG_FP32, blk.A_log.data))
        entries.append((pfx + "D", TAG_FP32, blk.D.data))
        entries.append((pfx + "norm_weight", TAG_FP32, blk.norm_weight.data))
    entries.append(("final_norm", TAG_FP32, inf.final_norm))
    write_checkpoint(path, inf.config, entries)


def load_packed(path: str) -> InferenceModel:
    cfg, tensors = read_checkpoint(path)

    def grab(name: str, tag: int) -> np.ndarray:
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        got_tag, arr = tensors[name]
        if got_tag != tag:
            raise CheckpointError(f"{name!r}: expected tag {tag}, found {got_tag}")
        return arr

    def projection(pfx: str, m: int, n: int):
        if pfx + ".bits" in tensors:
            words = grab(pfx + ".bits", TAG_BITS)
            alpha = grab(pfx + ".alpha", TAG_ALPHA)
            beta = grab(pfx + ".beta", TAG_BETA)
            if words.shape != (m, (n + 63) // 64) or alpha.shape != (n,) or beta.shape != (n,):
                raise CheckpointError(f"{pfx!r}: packed shapes do not match config")
            return PackedMatrix(m=m, n=n, words=words, alpha=alpha, beta=beta)
        w = grab(pfx + ".weight", TAG_FP32)
        if w.shape != (m, n):
            raise CheckpointError(f"{pfx!r}: weight shape {w.shape} does not match ({m}, {n})")
        return w

    layers, pre_norms = [], []
    any_packed = False
    for i in range(cfg.n_layer):
        pfx = f"layers.{i}."
        in_proj = projection(pfx + "in_proj", cfg.d_in_proj, cfg.d_model)
        out_proj = projection(pfx + "out_proj", cfg.d_model, cfg.d_inner)
        any_packed = any_packed or isinstance(in_proj, PackedMatrix) or isinstance(out_proj, PackedMatrix)
        layers.append(
            SsdBlockParams(
                d_model=cfg.d_model,
                d_inner=cfg.d_inner,
                d_state=cfg.d_state,
                n_heads=cfg.n_heads,
                d_conv=cfg.d_conv,
                in_proj=in_proj,
                conv_weight=Tensor(grab(pfx + "conv_weight", TAG_FP32)),
                conv_bias=Tensor(grab(pfx + "conv_bias", TAG_FP32)),
                dt_bias=Tensor(grab(pfx + "dt_bias", TAG_FP32)),
                A_log=Tensor(grab(pfx + "A_log", TAG_FP32)),
                D=Tensor(grab(pfx + "D", TAG_FP32)),
                norm_weight=Tensor(grab(pfx + "norm_weight", TAG_FP32)),
                out_proj=out_proj,
            )
        )
        pre_norms.append(grab(pfx + "pre_norm", TAG_FP32))
    return InferenceModel(
        config=cfg,
        embedding=grab("embedding", TAG_FP32),
        pre_norms=pre_norms,
        layers=layers,
        final_norm=grab("final_norm", TAG_FP32),
        packed=any_packed,
    )


# === storage accounting ===


@dataclass
class StorageReport:
    scope: str
    total_params: int
    binarized_params: int
    baseline_bytes: int
    packed_bytes: int
    overhead_bytes: int  # full-precision scale/shift vectors

    @property
    def binarized_fraction(self) -> float:
        return self.binarized_params / self.total_params

    @property
    def ratio(self) -> float:
        """Fraction of the baseline footprint that packing removes."""
        return 1.0 - self.packed_bytes / self.baseline_bytes

    @staticmethod
    def format_bytes(n: int) -> str:
        return f"{n / 2**30:.2f} GB"

    def lines(self) -> list[str]:
        return [
            f"scope\t{self.scope}",
            f"params\t{self.total_params}",
            f"binarized\t{self.binarized_params}\t({100 * self.binarized_fraction:.2f}%)",
            f"baseline\t{self.format_bytes(self.baseline_bytes)}",
            f"packed\t{self.format_bytes(self.packed_bytes)}",
            f"overhead\t{self.overhead_bytes} bytes",
            f"ratio\t{100 * self.ratio:.1f}%",
        ]


def binarized_layer_shapes(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(rows, cols) of every projection the scope binarizes."""
    scope_in, scope_out = cfg.scope_flags()
    shapes = []
    for _ in range(cfg.n_layer):
        if scope_in:
            shapes.append((cfg.d_in_proj, cfg.d_model))
        if scope_out:
            shapes.append((cfg.d_model, cfg.d_inner))
    return shapes


def storage_report(cfg: ModelConfig) -> StorageReport:
    """Half-precision baseline vs sign-bit packing with fp32 scale/shift."""
    total = total_params(cfg)
    shapes = binarized_layer_shapes(cfg)
    binarized = sum(m * n for m, n in shapes)
    bits_bytes = sum(m * ((n + 63) // 64) * 8 for m, n in shapes)
    overhead = sum(2 * n * 4 for _, n in shapes)
    packed = (total - binarized) * BASELINE_BYTES_PER_PARAM + bits_bytes + overhead
    return StorageReport(
        scope=cfg.scope,
        total_params=total,
        binarized_params=binarized,
        baseline_bytes=total * BASELINE_BYTES_PER_PARAM,
        packed_bytes=packed,
        overhead_bytes=overhead,
    )


def census_report(cfg: ModelConfig) -> list[str]:
    """Per-bucket parameter counts with percentages, as printable lines."""
    census = param_census(cfg)
    total = sum(census.values())
    out = [f"{name}\t{count}\t{100 * count / total:.2f}%" for name, count in census.items()]
    out.append(f"Total\t{total}\t100.00%")
    return out
