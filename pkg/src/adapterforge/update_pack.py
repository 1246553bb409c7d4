"""Bit-exact serialization of an adapter subset - the transmissible update.

Wire layout (little-endian, format version 1)::

    header:  magic "ADPT" | u16 version | u64 model_hash | u16 adapter_count
             | u16 tag_len | tag utf-8
    records, sorted by layer_id:
             u16 layer_id | u8 design | u32 channels
             | per design stage, in execution order:
                 BN stage   -> gamma, beta, mean, var     (f32[C] each)
                 conv stage -> weight f32[C*C], bias f32[C]
    footer:  u32 CRC-32 over all preceding bytes

``model_hash`` is the FNV-1a 64 hash of the target architecture's layout
(layer table + parameter shapes, not values), so a pack fits any checkpoint
of the same architecture; reproducing the sender's logits bit-for-bit
additionally requires the receiver to hold the sender's baseline weights.
Payloads are raw f32 - no quantization - keeping every equivalence
guarantee intact; compression belongs to the transport layer.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .adapters import Adapter, AdapterDesign, AdapterSet
from .errors import (
    PackCrcError,
    PackFormatError,
    PackHashError,
    PackVersionError,
)
from .tensor import BatchNormParams, ConvParams, Tensor

MAGIC = b"ADPT"
VERSION = 1

_RECORD_FIXED = 7  # layer_id u16 + design u8 + channels u32


def record_nbytes(adapter: Adapter) -> int:
    c = adapter.channels
    n = _RECORD_FIXED
    for stage in adapter.design.stages:
        if stage == "bn":
            n += 4 * 4 * c
        elif stage == "conv":
            n += 4 * (c * c + c)
    return n


def header_nbytes(domain_tag: str) -> int:
    return 4 + 2 + 8 + 2 + 2 + len(domain_tag.encode())


def pack_nbytes(adapters: AdapterSet) -> int:
    return header_nbytes(adapters.domain_tag) \
        + sum(record_nbytes(a) for a in adapters.values()) + 4


def pack(adapters: AdapterSet, model_hash: int) -> bytes:
    tag = adapters.domain_tag.encode()
    body = MAGIC + struct.pack("<HQH", VERSION, model_hash & 0xFFFFFFFFFFFFFFFF,
                               len(adapters))
    body += struct.pack("<H", len(tag)) + tag
    for a in adapters.values():  # sorted by layer_id
        body += struct.pack("<HBI", a.layer_id, a.design.wire_id, a.channels)
        bn_i = conv_i = 0
        for stage in a.design.stages:
            if stage == "bn":
                b = a.bns[bn_i]
                for arr in (b.gamma.data, b.beta.data, b.running_mean, b.running_var):
                    body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
                bn_i += 1
            elif stage == "conv":
                cv = a.convs[conv_i]
                body += np.ascontiguousarray(cv.weight.data, dtype="<f4").tobytes()
                body += np.ascontiguousarray(cv.bias.data, dtype="<f4").tobytes()
                conv_i += 1
    return body + struct.pack("<I", zlib.crc32(body))


def unpack(data: bytes):
    """-> (model_hash, domain_tag, AdapterSet); validates CRC and structure."""
    if len(data) < header_nbytes("") + 4 or data[:4] != MAGIC:
        raise PackFormatError("not an ADPT update pack")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise PackCrcError("update pack CRC mismatch: corrupted payload")
    off = 4
    version, model_hash, count = struct.unpack_from("<HQH", data, off)
    off += 12
    if version != VERSION:
        raise PackVersionError(f"unsupported pack version {version}")
    (tag_len,) = struct.unpack_from("<H", data, off)
    off += 2
    tag = data[off:off + tag_len].decode()
    off += tag_len

    def read_f32(n):
        nonlocal off
        if off + 4 * n > len(payload):
            raise PackFormatError("truncated update pack record")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).copy()
        off += 4 * n
        return arr

    adapters = []
    for _ in range(count):
        if off + _RECORD_FIXED > len(payload):
            raise PackFormatError("truncated update pack record")
        layer_id, design_id, channels = struct.unpack_from("<HBI", data, off)
        off += _RECORD_FIXED
        try:
            design = list(AdapterDesign)[design_id]
        except IndexError:
            raise PackFormatError(f"unknown adapter design id {design_id}")
        bns, convs = [], []
        for stage in design.stages:
            if stage == "bn":
                gamma, beta, mean, var = (read_f32(channels) for _ in range(4))
                bns.append(BatchNormParams(
                    gamma=Tensor(gamma, requires_grad=True),
                    beta=Tensor(beta, requires_grad=True),
                    running_mean=mean, running_var=var))
            elif stage == "conv":
                w = read_f32(channels * channels).reshape(channels, channels, 1, 1)
                b = read_f32(channels)
                convs.append(ConvParams(
                    weight=Tensor(w, requires_grad=True),
                    bias=Tensor(b, requires_grad=True), stride=1, padding=0))
        adapters.append(Adapter(layer_id, design, bns, convs))
    if off != len(payload):
        raise PackFormatError(f"{len(payload) - off} trailing bytes in update pack")
    return model_hash, tag, AdapterSet(adapters, domain_tag=tag)


def apply(model, data: bytes, fuse: bool = False):
    """Attach (or attach-and-fuse) a pack to a compatible model.

    Fully validates before touching anything and never mutates its inputs:
    returns (model_copy, adapters) or, with fuse=True, the fused model.
    """
    model_hash, _tag, adapters = unpack(data)
    if model_hash != model.layout_hash():
        raise PackHashError(
            "incompatible model: pack was built for a different architecture layout")
    adapters.validate_against(model)
    if fuse:
        from .fusion import fuse_model

        return fuse_model(model, adapters)
    return model.copy(), adapters


def inspect(data: bytes) -> dict:
    model_hash, tag, adapters = unpack(data)
    return {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "model_hash": f"{model_hash:016x}",
        "domain_tag": tag,
        "adapter_count": len(adapters),
        "total_bytes": len(data),
        "records": [
            {
                "layer_id": a.layer_id,
                "design": a.design.value,
                "channels": a.channels,
                "record_bytes": record_nbytes(a),
            }
            for a in adapters.values()
        ],
    }
