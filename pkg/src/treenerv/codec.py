"""Model compression: global magnitude pruning, affine quantization and
canonical Huffman coding, plus the binary model container.

Container layout (little-endian)::

    magic b"TNRV" | version u32 | header_len u32 | header JSON (UTF-8)
    | payload, padded to a byte boundary | crc32 u32

The CRC covers every byte before it.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .decoder import Decoder, DecoderConfig, NervBlock
from .model import TreeNerv
from .tree import TreeGrid

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CodecError",
    "DecodeError",
    "QuantizedTensor",
    "quantize_affine",
    "dequantize",
    "huffman_code_lengths",
    "canonical_codes",
    "entropy_encode",
    "entropy_decode",
    "PruneMask",
    "prune_global",
    "ModelContainer",
    "compress",
    "decompress",
    "quantize_model",
    "psnr",
    "video_psnr",
    "bpp",
]

MAGIC = b"TNRV"
FORMAT_VERSION = 1
PSNR_CAP = 100.0
MAX_CODE_LENGTH = 32


class CodecError(ValueError):
    pass


class DecodeError(CodecError):
    pass


# -- metrics ------------------------------------------------------------------


def psnr(pred, target) -> float:
    """Peak-1 PSNR in dB, capped at 100 dB for near-identical inputs."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"psnr shape mismatch: {p.shape} vs {t.shape}")
    mse = float(np.mean((p - t) ** 2))
    return mse_to_psnr(mse)


def mse_to_psnr(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def video_psnr(preds: Sequence, targets: Sequence) -> float:
    """Mean of per-frame PSNR."""
    if len(preds) != len(targets) or not preds:
        raise ValueError("video_psnr needs equally many (>0) predictions and targets")
    return float(np.mean([psnr(p, t) for p, t in zip(preds, targets)]))


def bpp(container: "ModelContainer | bytes | int", length: int, height: int, width: int) -> float:
    pixels = int(length) * int(height) * int(width)
    if pixels <= 0:
        raise ValueError(f"zero-size video ({length}x{height}x{width})")
    if isinstance(container, ModelContainer):
        bits = container.total_bits
    elif isinstance(container, (bytes, bytearray)):
        bits = 8 * len(container)
    else:
        bits = int(container)
    return bits / pixels


# -- quantization -------------------------------------------------------------


@dataclass
class QuantizedTensor:
    symbols: np.ndarray
    scale: float
    zero_point: float
    shape: tuple
    bits: int

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        vals = self.zero_point + self.scale * self.symbols.astype(np.float64)
        return vals.astype(dtype).reshape(self.shape)


def quantize_affine(x, bits: int = 8) -> QuantizedTensor:
    """Per-tensor min/max affine quantization to ``bits``-bit unsigned symbols."""
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    flat = data.astype(np.float64).ravel()
    lo, hi = float(flat.min()), float(flat.max())
    levels = (1 << bits) - 1
    if hi == lo:
        return QuantizedTensor(np.zeros(flat.size, dtype=np.uint32), 0.0, lo, data.shape, bits)
    scale = (hi - lo) / levels
    sym = np.clip(np.round((flat - lo) / scale), 0, levels).astype(np.uint32)
    return QuantizedTensor(sym, scale, lo, data.shape, bits)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> Tensor:
    return Tensor(q.dequantize(dtype), dtype=dtype)


# -- bit I/O ------------------------------------------------------------------


class BitWriter:
    def __init__(self):
        self._parts: list[str] = []
        self.nbits = 0

    def write(self, value: int, width: int) -> None:
        if width == 0:
            return
        if value < 0 or value >> width:
            raise CodecError(f"value {value} does not fit in {width} bits")
        self._parts.append(format(value, f"0{width}b"))
        self.nbits += width

    def write_bits(self, bits: str) -> None:
        self._parts.append(bits)
        self.nbits += len(bits)

    def getbits(self) -> str:
        return "".join(self._parts)

    def getvalue(self) -> bytes:
        return bits_to_bytes(self.getbits())


def bits_to_bytes(bits: str) -> bytes:
    if not bits:
        return b""
    pad = (-len(bits)) % 8
    padded = bits + "0" * pad
    return int(padded, 2).to_bytes(len(padded) // 8, "big")


def bytes_to_bits(data: bytes, nbits: Optional[int] = None) -> str:
    if not data:
        return ""
    bits = format(int.from_bytes(data, "big"), f"0{8 * len(data)}b")
    return bits if nbits is None else bits[:nbits]


class BitReader:
    def __init__(self, bits: str, pos: int = 0):
        self.bits = bits
        self.pos = pos

    def read(self, width: int) -> int:
        if width == 0:
            return 0
        end = self.pos + width
        if end > len(self.bits):
            raise DecodeError(f"bitstream truncated: need {width} bits at offset {self.pos}, {len(self.bits) - self.pos} left")
        val = int(self.bits[self.pos:end], 2)
        self.pos = end
        return val


# -- canonical Huffman --------------------------------------------------------


def huffman_code_lengths(freqs: dict, max_length: int = MAX_CODE_LENGTH) -> dict:
    """Huffman code length per symbol; one distinct symbol gets length 1."""
    freqs = {s: f for s, f in freqs.items() if f > 0}
    if not freqs:
        return {}
    if len(freqs) == 1:
        return {next(iter(freqs)): 1}
    while True:
        # (weight, tiebreak, symbols in subtree)
        heap = [(f, s, [s]) for s, f in sorted(freqs.items())]
        heapq.heapify(heap)
        depth = dict.fromkeys(freqs, 0)
        while len(heap) > 1:
            fa, ta, sa = heapq.heappop(heap)
            fb, tb, sb = heapq.heappop(heap)
            for s in sa:
                depth[s] += 1
            for s in sb:
                depth[s] += 1
            heapq.heappush(heap, (fa + fb, min(ta, tb), sa + sb))
        if max(depth.values()) <= max_length:
            return depth
        # flatten the histogram until the deepest code fits
        freqs = {s: (f + 1) // 2 for s, f in freqs.items()}


def canonical_codes(lengths: dict) -> dict:
    """Assign canonical codes (as bit strings) ordered by (length, symbol)."""
    code = 0
    prev_len = 0
    out = {}
    for sym, ln in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0])):
        code <<= ln - prev_len
        out[sym] = format(code, f"0{ln}b")
        code += 1
        prev_len = ln
    return out


def _symbol_width(symbols: np.ndarray) -> int:
    top = int(symbols.max()) if symbols.size else 0
    return max(1, top.bit_length())


def entropy_encode(symbols, width: Optional[int] = None) -> tuple[bytes, int]:
    """Canonical Huffman encode. Returns ``(bytes, bit_length)``.

    Stream: n (32 bits) | width-1 (5 bits) | distinct count (width+1 bits)
    | (symbol, code length - 1) pairs | codes.
    """
    w = BitWriter()
    encode_into(w, symbols, width)
    return w.getvalue(), w.nbits


def encode_into(w: BitWriter, symbols, width: Optional[int] = None) -> None:
    sym = np.asarray(symbols, dtype=np.int64).ravel()
    if sym.size and sym.min() < 0:
        raise CodecError("symbols must be non-negative")
    needed = _symbol_width(sym)
    width = needed if width is None else int(width)
    if width < needed or not 1 <= width <= 32:
        raise CodecError(f"symbols need {needed} bits but width {width} was declared")
    if sym.size >> 32:
        raise CodecError("stream too long")
    w.write(int(sym.size), 32)
    w.write(width - 1, 5)
    if sym.size == 0:
        return
    counts = Counter(sym.tolist())
    lengths = huffman_code_lengths(counts)
    w.write(len(lengths), width + 1)
    for s in sorted(lengths):
        w.write(int(s), width)
        w.write(lengths[s] - 1, 5)
    codes = canonical_codes(lengths)
    w.write_bits("".join(codes[s] for s in sym.tolist()))


def entropy_decode(data: bytes, nbits: Optional[int] = None) -> np.ndarray:
    bits = bytes_to_bits(data, nbits)
    r = BitReader(bits)
    out = decode_from(r)
    return out


def decode_from(r: BitReader) -> np.ndarray:
    n = r.read(32)
    width = r.read(5) + 1
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    m = r.read(width + 1)
    if m == 0 or m > (1 << width):
        raise DecodeError(f"invalid distinct-symbol count {m} at offset {r.pos - width - 1}")
    lengths = {}
    for _ in range(m):
        s = r.read(width)
        lengths[s] = r.read(5) + 1
    if sum(2.0 ** -ln for ln in lengths.values()) > 1.0 + 1e-12:
        raise DecodeError(f"code lengths violate the Kraft inequality (table ends at offset {r.pos})")
    # canonical decode tables: per length, first code and index into ordered symbols
    ordered = sorted(lengths, key=lambda s: (lengths[s], s))
    max_len = max(lengths.values())
    count = [0] * (max_len + 1)
    for ln in lengths.values():
        count[ln] += 1
    first = [0] * (max_len + 1)
    index = [0] * (max_len + 1)
    code = idx = 0
    for ln in range(1, max_len + 1):
        code = (code + count[ln - 1]) << 1 if ln > 1 else 0
        first[ln] = code
        index[ln] = idx
        idx += count[ln]
    bits = r.bits
    pos = r.pos
    total = len(bits)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        start = pos
        code = 0
        ln = 0
        while True:
            if pos >= total:
                raise DecodeError(f"bitstream ended inside symbol {i} (code started at offset {start})")
            code = (code << 1) | (bits[pos] == "1")
            pos += 1
            ln += 1
            off = code - first[ln]
            if 0 <= off < count[ln]:
                out[i] = ordered[index[ln] + off]
                break
            if ln >= max_len:
                raise DecodeError(f"invalid code for symbol {i} at offset {start}")
    r.pos = pos
    return out


# -- pruning ------------------------------------------------------------------


@dataclass
class PruneMask:
    """Run-length mask over the concatenated decoder weights.

    ``runs`` alternate kept/pruned lengths, starting with a kept run (which
    may be zero). No pruned weights means an empty run list.
    """

    runs: list = field(default_factory=list)
    total: int = 0

    @classmethod
    def from_bool(cls, pruned: np.ndarray) -> "PruneMask":
        pruned = np.asarray(pruned, dtype=bool).ravel()
        if not pruned.any():
            return cls([], int(pruned.size))
        runs = []
        current = False
        length = 0
        for flag in pruned.tolist():
            if flag == current:
                length += 1
            else:
                runs.append(length)
                current = flag
                length = 1
        runs.append(length)
        return cls(runs, int(pruned.size))

    def to_bool(self) -> np.ndarray:
        out = np.zeros(self.total, dtype=bool)
        pos = 0
        for i, ln in enumerate(self.runs):
            if i % 2:
                out[pos:pos + ln] = True
            pos += ln
        if self.runs and pos != self.total:
            raise DecodeError(f"mask runs cover {pos} weights, expected {self.total}")
        return out

    @property
    def pruned_count(self) -> int:
        return sum(self.runs[1::2])


def prune_global(decoder: Decoder, fraction: float) -> tuple[PruneMask, Decoder]:
    """Zero the ``floor(fraction * n)`` smallest-magnitude decoder weights.

    Biases are exempt. Ties are broken by position, so pruning is
    deterministic and idempotent.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"pruning fraction must be in [0, 1), got {fraction}")
    pruned = decoder.copy()
    weights = pruned.weight_tensors()
    flat = np.concatenate([w.data.ravel() for w in weights]) if weights else np.zeros(0)
    n_prune = int(math.floor(fraction * flat.size))
    mask = np.zeros(flat.size, dtype=bool)
    if n_prune:
        order = np.argsort(np.abs(flat.astype(np.float64)), kind="stable")
        mask[order[:n_prune]] = True
        pos = 0
        for w in weights:
            m = mask[pos:pos + w.size].reshape(w.shape)
            w.data[m] = 0.0
            pos += w.size
    return PruneMask.from_bool(mask), pruned


# -- container ----------------------------------------------------------------


def _tensor_order(model: TreeNerv) -> list:
    """(name, tensor, is_prunable_weight) in serialization order."""
    items = [(f"node{i}", n.value, False) for i, n in enumerate(model.grid.preorder())]
    for name, p in model.decoder.named_parameters():
        items.append((name, p, name.endswith("weight")))
    return items


@dataclass
class ModelContainer:
    header: dict
    payload: bytes

    @property
    def total_bits(self) -> int:
        return 8 * len(self.to_bytes())

    @property
    def payload_bits(self) -> int:
        return int(self.header["payload_bits"])

    @property
    def key_bits(self) -> int:
        return 64 * len(self.header["keys"])

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + self.payload
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelContainer":
        if len(blob) < 16 or blob[:4] != MAGIC:
            raise CodecError("not a model container (bad magic)")
        version, head_len = struct.unpack("<II", blob[4:12])
        if version != FORMAT_VERSION:
            raise CodecError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
        (crc,) = struct.unpack("<I", blob[-4:])
        if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
            raise CodecError("container checksum mismatch")
        head = blob[12:12 + head_len]
        if len(head) != head_len:
            raise CodecError("container header truncated")
        header = json.loads(head.decode("utf-8"))
        return cls(header, blob[12 + head_len:-4])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelContainer":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _base_header(model: TreeNerv) -> dict:
    grid = model.grid
    return {
        "value_shape": list(grid.value_shape),
        "length": grid.length,
        "decoder": model.decoder.config.to_dict(),
        "keys": [n.key for n in grid.preorder()],
    }


def compress(model: TreeNerv, prune_fraction: float = 0.1, bits: Optional[int] = 8) -> ModelContainer:
    """Prune, quantize and entropy-code ``model``.

    ``bits=None`` stores raw float32 parameters instead (lossless, no pruning).
    """
    header = _base_header(model)
    if bits is None:
        if prune_fraction:
            raise ValueError("float32 containers do not support pruning")
        payload = b"".join(t.data.astype("<f4").tobytes() for _, t, _ in _tensor_order(model))
        header.update(encoding="float32", payload_bits=8 * len(payload),
                      tensors=[{"name": n, "shape": list(t.shape)} for n, t, _ in _tensor_order(model)])
        return ModelContainer(header, payload)

    mask, pruned_decoder = prune_global(model.decoder, prune_fraction)
    pruned = TreeNerv(model.grid, pruned_decoder)
    keep = ~mask.to_bool() if mask.runs else np.ones(mask.total, dtype=bool)
    tensors = []
    streams = []
    pos = 0
    for name, t, prunable in _tensor_order(pruned):
        flat = t.data.ravel()
        if prunable:
            sel = keep[pos:pos + flat.size]
            pos += flat.size
            flat = flat[sel]
        entry = {"name": name, "shape": list(t.shape), "count": int(flat.size)}
        if flat.size:
            q = quantize_affine(flat, bits)
            entry.update(scale=q.scale, zero_point=q.zero_point)
            streams.append(q.symbols)
        tensors.append(entry)
    w = BitWriter()
    symbols = np.concatenate(streams) if streams else np.zeros(0, dtype=np.int64)
    encode_into(w, symbols, bits)
    symbol_bits = w.nbits
    encode_into(w, np.asarray(mask.runs, dtype=np.int64))
    header.update(
        encoding="quant-huffman",
        bits=bits,
        prune_fraction=prune_fraction,
        weight_count=mask.total,
        pruned_count=mask.pruned_count,
        mask_runs=len(mask.runs),
        symbol_stream_bits=symbol_bits,
        mask_stream_bits=w.nbits - symbol_bits,
        payload_bits=w.nbits,
        tensors=tensors,
    )
    return ModelContainer(header, w.getvalue())


def decompress(container: "ModelContainer | bytes") -> TreeNerv:
    if not isinstance(container, ModelContainer):
        container = ModelContainer.from_bytes(container)
    h = container.header
    config = DecoderConfig.from_dict(h["decoder"])
    skeleton = Decoder.build(config, seed=0)
    specs = h["tensors"]
    n_nodes = len(h["keys"])
    values: list[np.ndarray] = []
    if h["encoding"] == "float32":
        raw = np.frombuffer(container.payload, dtype="<f4")
        pos = 0
        for spec in specs:
            size = int(np.prod(spec["shape"]))
            if pos + size > raw.size:
                raise DecodeError(f"payload truncated in tensor {spec['name']}")
            values.append(raw[pos:pos + size].astype(np.float32).reshape(spec["shape"]))
            pos += size
    elif h["encoding"] == "quant-huffman":
        reader = BitReader(bytes_to_bits(container.payload, int(h["payload_bits"])))
        symbols = decode_from(reader)
        runs = decode_from(reader).tolist()
        mask = PruneMask(runs, int(h["weight_count"]))
        keep = ~mask.to_bool() if runs else np.ones(mask.total, dtype=bool)
        spos = wpos = 0
        for i, spec in enumerate(specs):
            shape = spec["shape"]
            size = int(np.prod(shape))
            count = int(spec["count"])
            if spos + count > symbols.size:
                raise DecodeError(f"symbol stream too short for tensor {spec['name']}")
            vals = np.zeros(0, dtype=np.float32)
            if count:
                q = QuantizedTensor(symbols[spos:spos + count], spec["scale"], spec["zero_point"], (count,), int(h["bits"]))
                vals = q.dequantize()
            spos += count
            if i >= n_nodes and spec["name"].endswith("weight"):
                full = np.zeros(size, dtype=np.float32)
                sel = keep[wpos:wpos + size]
                wpos += size
                if int(sel.sum()) != count:
                    raise DecodeError(f"prune mask disagrees with tensor {spec['name']}")
                full[sel] = vals
                vals = full
            values.append(vals.reshape(shape))
    else:
        raise CodecError(f"unknown payload encoding {h['encoding']!r}")

    items = [(k, Tensor(v, requires_grad=True)) for k, v in zip(h["keys"], values[:n_nodes])]
    grid = TreeGrid.from_preorder(items, h["value_shape"], h["length"])
    params = skeleton.parameters()
    if len(params) != len(values) - n_nodes:
        raise DecodeError("tensor count does not match decoder layout")
    for p, v in zip(params, values[n_nodes:]):
        if tuple(p.shape) != tuple(v.shape):
            raise DecodeError(f"tensor shape {v.shape} does not fit parameter {p.shape}")
        p.data = np.ascontiguousarray(v, dtype=np.float32)
    return TreeNerv(grid, skeleton)


def quantize_model(model: TreeNerv, prune_fraction: float = 0.1, bits: int = 8) -> TreeNerv:
    """In-memory pruned + quantized copy, without the entropy stage."""
    mask, dec = prune_global(model.decoder, prune_fraction)
    keep = ~mask.to_bool() if mask.runs else np.ones(mask.total, dtype=bool)
    items = []
    for node in model.grid.preorder():
        q = quantize_affine(node.value.data.ravel(), bits)
        items.append((node.key, Tensor(q.dequantize().reshape(node.value.shape), requires_grad=True)))
    grid = TreeGrid.from_preorder(items, model.grid.value_shape, model.grid.length)
    pos = 0
    for name, p in dec.named_parameters():
        flat = p.data.ravel().copy()
        if name.endswith("weight"):
            sel = keep[pos:pos + flat.size]
            pos += flat.size
            out = np.zeros_like(flat)
            if sel.any():
                out[sel] = quantize_affine(flat[sel], bits).dequantize()
            p.data = out.reshape(p.shape)
        else:
            p.data = quantize_affine(flat, bits).dequantize().reshape(p.shape)
    return TreeNerv(grid, dec)
