"""Bit-packed on-disk container for quantized models.

Layout (all integers little-endian)::

    header   magic "QSVW" | version u8 | record count u32
    record   name length u32 | name UTF-8 | rank u32 | dims u32 * rank
             | scheme u8 | bitwidth u8 | alpha f32 | mu f32 | sigma f32
             | payload | CRC-32 of payload u32

Scheme byte is 0 for uniform, 1 for powers of two and 255 for raw float32
records (bitwidth 32, alpha/mu/sigma zero). Quantized payloads hold one
``b``-bit level code per element, LSB-first inside each byte, with the
last byte zero-padded. Level values are not stored; they are rebuilt from
(scheme, b, alpha) on load.
"""

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write
from .exceptions import ConfigurationError, CorruptionError
from .quantizer import MAX_BITS, MIN_BITS, QuantizedTensor, QuantizerConfig, QuantScheme, dequantize, quantize

MAGIC = b"QSVW"
VERSION = 1
FP32 = 255
SCHEME_BYTES = {QuantScheme.UNIFORM: 0, QuantScheme.POT: 1}
_SCHEMES = {v: k for k, v in SCHEME_BYTES.items()}

_HEADER = struct.Struct("<4sBI")
_U32 = struct.Struct("<I")
_META = struct.Struct("<BBfff")
HEADER_BYTES = _HEADER.size
RECORD_FIXED_BYTES = _META.size  # scheme, bitwidth, alpha, mu, sigma
CRC_BYTES = 4


@dataclass
class TensorRecord:
    """One named tensor: level codes plus quantizer config, or raw float32 data."""

    name: str
    shape: tuple
    data: np.ndarray
    config: QuantizerConfig = None

    @property
    def quantized(self):
        return self.config is not None

    @property
    def bits(self):
        return self.config.bits if self.quantized else 32

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @classmethod
    def from_quantized(cls, name, q):
        return cls(name, tuple(q.shape), np.asarray(q.codes, dtype=np.uint8), q.config)

    @classmethod
    def from_array(cls, name, array):
        array = np.asarray(array, dtype=np.float32)
        return cls(name, tuple(array.shape), array)

    def values(self):
        """Forward weights: dequantized levels or the raw floats."""
        if self.quantized:
            return dequantize(QuantizedTensor(self.data, self.config, self.shape))
        return self.data.reshape(self.shape)


def payload_nbytes(n_elements, bits):
    if bits == 32:
        return 4 * n_elements
    return (n_elements * bits + 7) // 8


def record_nbytes(name, shape, bits):
    """Exact encoded size of one record."""
    return (
        _U32.size
        + len(name.encode("utf-8"))
        + _U32.size * (1 + len(shape))
        + RECORD_FIXED_BYTES
        + payload_nbytes(int(np.prod(shape, dtype=np.int64)), bits)
        + CRC_BYTES
    )


def file_nbytes(specs):
    """Exact file size for an iterable of ``(name, shape, bits)``."""
    return HEADER_BYTES + sum(record_nbytes(n, s, b) for n, s, b in specs)


def pack_codes(codes, bits):
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    bitplanes = (codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(bitplanes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf, n_elements, bits):
    raw = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    planes = raw[: n_elements * bits].reshape(n_elements, bits).astype(np.uint16)
    return (planes << np.arange(bits, dtype=np.uint16)).sum(axis=1).astype(np.uint8)


def _encode_record(rec):
    name = rec.name.encode("utf-8")
    shape = tuple(int(d) for d in rec.shape)
    parts = [_U32.pack(len(name)), name, _U32.pack(len(shape))]
    parts += [_U32.pack(d) for d in shape]
    if rec.quantized:
        cfg = rec.config
        codes = np.asarray(rec.data).reshape(-1)
        if codes.size != rec.size:
            raise ConfigurationError(f"{rec.name}: {codes.size} codes for shape {shape}")
        if codes.size and int(codes.max()) >= 2**cfg.bits - 1:
            raise ConfigurationError(f"{rec.name}: code out of range for {cfg.bits}-bit levels")
        parts.append(_META.pack(SCHEME_BYTES[cfg.scheme], cfg.bits, cfg.alpha, cfg.mu, cfg.sigma))
        payload = pack_codes(codes, cfg.bits)
    else:
        data = np.asarray(rec.data, dtype="<f4").reshape(-1)
        if data.size != rec.size:
            raise ConfigurationError(f"{rec.name}: {data.size} values for shape {shape}")
        parts.append(_META.pack(FP32, 32, 0.0, 0.0, 0.0))
        payload = data.tobytes()
    parts += [payload, _U32.pack(zlib.crc32(payload))]
    return b"".join(parts)


def encode(records):
    records = list(records)
    body = [_HEADER.pack(MAGIC, VERSION, len(records))]
    body += [_encode_record(r) for r in records]
    return b"".join(body)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def decode(buf, verify=True):
    """Parse a packfile image into a list of :class:`TensorRecord`.

    With ``verify`` a payload whose CRC does not match raises
    :class:`CorruptionError`; without it the payload is decoded as is.
    """
    r = _Reader(memoryview(buf).tobytes())
    magic, version, count = _HEADER.unpack(r.take(HEADER_BYTES, "header"))
    if magic != MAGIC:
        raise CorruptionError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CorruptionError(f"unsupported format version {version}", 4)
    records = []
    for _ in range(count):
        start = r.pos
        name_bytes = r.take(r.u32("name length"), "name")
        try:
            name = name_bytes.decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError("record name is not UTF-8", start) from None
        rank = r.u32("rank")
        if rank > 16:
            raise CorruptionError(f"implausible rank {rank}", r.pos - 4)
        shape = tuple(r.u32("dims") for _ in range(rank))
        meta_at = r.pos
        scheme_b, bits, alpha, mu, sigma = _META.unpack(r.take(_META.size, "record metadata"))
        n = int(np.prod(shape, dtype=np.int64))
        if scheme_b == FP32:
            if bits != 32:
                raise CorruptionError(f"float record with bitwidth {bits}", meta_at)
        elif scheme_b in _SCHEMES:
            if not MIN_BITS <= bits <= MAX_BITS or not alpha > 0 or not sigma > 0:
                raise CorruptionError("invalid quantizer metadata", meta_at)
        else:
            raise CorruptionError(f"unknown scheme byte {scheme_b}", meta_at)
        payload_at = r.pos
        payload = r.take(payload_nbytes(n, bits), "payload")
        crc = r.u32("checksum")
        if verify and crc != zlib.crc32(payload):
            raise CorruptionError(f"checksum mismatch in record {name!r}", payload_at)
        if scheme_b == FP32:
            records.append(TensorRecord(name, shape, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)))
            continue
        codes = unpack_codes(payload, n, bits)
        if n and int(codes.max()) >= 2**bits - 1:
            raise CorruptionError(f"level code out of range in record {name!r}", payload_at)
        cfg = QuantizerConfig(_SCHEMES[scheme_b], bits, alpha, mu, sigma)
        records.append(TensorRecord(name, shape, codes.reshape(shape), cfg))
    if r.pos != len(r.buf):
        raise CorruptionError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    return records


def pack(records, path):
    """Write records to ``path``; returns the number of bytes written."""
    data = encode(records)
    atomic_write(path, data)
    return len(data)


def unpack(path, verify=True):
    with open(path, "rb") as fh:
        return decode(fh.read(), verify=verify)


def model_records(model, scheme=None, bits=None, alpha=3.0):
    """Records for every tensor of ``model``.

    Quantizable layers with active quantization use their own scheme, bits
    and learned alpha. Otherwise, when ``scheme`` and ``bits`` are given,
    their weights are quantized post-training with ``alpha``; the rest is
    stored as float32.
    """
    quantized = {}
    for name, layer in quantizable_layers(model):
        if layer.quant is not None:
            s, b, a = layer.quant
            cfg = QuantizerConfig(s, b, float(a.data[0]))
        elif scheme is not None:
            cfg = QuantizerConfig(scheme, bits, alpha)
        else:
            continue
        quantized[name + "weight"] = quantize(layer.weight.data, cfg)
    records = []
    for key, arr in model.state_dict().items():
        if key in quantized:
            records.append(TensorRecord.from_quantized(key, quantized[key]))
        else:
            records.append(TensorRecord.from_array(key, arr))
    return records


def quantizable_layers(model):
    from .layers import QuantizableLayer

    return [(prefix, m) for prefix, m in model.named_modules() if isinstance(m, QuantizableLayer)]


def pack_model(model, path, scheme=None, bits=None, alpha=3.0):
    return pack(model_records(model, scheme, bits, alpha), path)


def load_into(model, records):
    """Load unpacked records as the model's (frozen, dequantized) forward weights."""
    state = {r.name: r.values() for r in records}
    for _, layer in quantizable_layers(model):
        layer.disable_quantization()
    model.load_state_dict(state)
    return model


def describe(path):
    """Header and per-record metadata as a JSON-serializable dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    records = decode(buf)
    out = {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "tensor_count": len(records),
        "file_bytes": len(buf),
        "records": [],
    }
    for rec in records:
        entry = {
            "name": rec.name,
            "shape": list(rec.shape),
            "scheme_byte": SCHEME_BYTES[rec.config.scheme] if rec.quantized else FP32,
            "scheme": rec.config.scheme.value if rec.quantized else "fp32",
            "bitwidth": rec.bits,
            "payload_bytes": payload_nbytes(rec.size, rec.bits),
        }
        if rec.quantized:
            entry.update(alpha=rec.config.alpha, mu=rec.config.mu, sigma=rec.config.sigma)
        out["records"].append(entry)
    return out


def describe_json(path):
    return json.dumps(describe(path), indent=2)
