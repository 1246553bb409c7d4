"""A desk-scale U-Net for 3-class segmentation of grayscale scenes.

Architecture (default): two encoder blocks at 8 and 16 channels, a 32-channel
bottleneck, decoder blocks at 16 and 8 channels, each block being two
[conv3x3 -> BN -> ReLU] layers, 2x max-pool down / nearest-neighbour up,
concatenation skip links, and a biased 1x1 head producing 3 logit channels.
Conv layers followed by a BN carry no bias; a fused layer (see the fusion
module) carries a bias and no BN.

Cost convention, stated in every report: one multiply-accumulate counts as
2 FLOPs; the per-element affine epilogue of a layer (BN in eval mode, or the
bias of a fused/head conv) counts 2 FLOPs; ReLU and residual adds count 1;
pooling, upsampling and concatenation count 0.

Model files use the little-endian ``MUNT`` container: magic, u16 format
version, a layer table describing the architecture, per-layer f32 parameter
blobs, and a trailing CRC-32 over all preceding bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .rng import Stream, derive
from .tensor import (
    BatchNormParams,
    ConvParams,
    Tensor,
    add,
    batchnorm_forward,
    concat_channels,
    conv2d_forward,
    make_bn,
    maxpool2x2,
    relu,
    upsample_nearest2x,
)

MAGIC = b"MUNT"
FORMAT_VERSION = 1

_KINDS = ("conv3x3", "conv1x1_head")
_STAGES = ("encoder", "bottleneck", "decoder", "head")

FLOP_CONVENTION = "MAC=2; BN-eval or bias epilogue=2/elem; ReLU=1/elem; residual add=1/elem"


@dataclass
class LayerSpec:
    id: int
    kind: str
    c_in: int
    c_out: int
    followed_by_bn: bool
    stage: str


@dataclass
class CostReport:
    total_params: int
    trainable_params: int
    flops_per_image: int
    storage_bytes: int
    convention: str = FLOP_CONVENTION

    def as_dict(self):
        return {
            "total_params": self.total_params,
            "trainable_params": self.trainable_params,
            "flops_per_image": self.flops_per_image,
            "storage_bytes": self.storage_bytes,
            "convention": self.convention,
        }


class MicroUNet:
    """Layer specs, parameter store and dataflow plan for the toy U-Net."""

    def __init__(self, layers, conv, bn, skip_links, fused, bn_eps=1e-5,
                 bn_momentum=0.1, norm_mean=0.0, norm_std=1.0):
        self.layers = list(layers)
        self.conv = dict(conv)          # layer id -> ConvParams
        self.bn = dict(bn)              # layer id -> BatchNormParams (unfused only)
        self.skip_links = list(skip_links)
        self.fused = dict(fused)        # layer id -> bool
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.norm_mean = float(norm_mean)
        self.norm_std = float(norm_std)
        self._plan = _build_plan(self.layers, self.skip_links)

    # -- parameters -----------------------------------------------------

    def param_registry(self):
        """Ordered name -> Tensor map over every learnable parameter."""
        reg = {}
        for spec in self.layers:
            lid = spec.id
            p = self.conv[lid]
            reg[f"layer{lid}.conv.weight"] = p.weight
            if p.bias is not None:
                reg[f"layer{lid}.conv.bias"] = p.bias
            if lid in self.bn:
                reg[f"layer{lid}.bn.gamma"] = self.bn[lid].gamma
                reg[f"layer{lid}.bn.beta"] = self.bn[lid].beta
        return reg

    def set_all_trainable(self, flag: bool):
        for t in self.param_registry().values():
            t.requires_grad = flag

    def copy(self) -> "MicroUNet":
        conv = {}
        for lid, p in self.conv.items():
            conv[lid] = ConvParams(
                weight=p.weight.copy(),
                bias=None if p.bias is None else p.bias.copy(),
                stride=p.stride,
                padding=p.padding,
            )
        bn = {}
        for lid, b in self.bn.items():
            bn[lid] = BatchNormParams(
                gamma=b.gamma.copy(),
                beta=b.beta.copy(),
                running_mean=b.running_mean.copy(),
                running_var=b.running_var.copy(),
                eps=b.eps,
                momentum=b.momentum,
            )
        return MicroUNet(
            [LayerSpec(**vars(s)) for s in self.layers], conv, bn,
            list(self.skip_links), dict(self.fused), self.bn_eps,
            self.bn_momentum, self.norm_mean, self.norm_std,
        )

    # -- inference ------------------------------------------------------

    def forward(self, x: Tensor, adapters=None, mode: str = "eval") -> Tensor:
        """Run the network; returns (n, 3, H, W) logits.

        With adapters attached, the dataflow inside an adapted layer is
        conv -> residual adapter -> BN -> ReLU.  In train mode a BN uses
        batch statistics only while its affine parameters are trainable,
        so frozen parts of the network stay bit-identical.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        n, c, h, w = x.shape
        if c != self.layers[0].c_in:
            raise ShapeError(f"expected {self.layers[0].c_in} input channels, got {c}")
        if h % 4 or w % 4:
            raise ShapeError(f"input spatial dims must be multiples of 4, got {h}x{w}")
        if adapters is not None:
            adapters.validate_against(self)

        saved = {}
        cur = x
        for step, arg in self._plan:
            if step == "conv":
                cur = self._layer_forward(arg, cur, adapters, mode)
            elif step == "save":
                saved[arg] = cur
            elif step == "pool":
                cur = maxpool2x2(cur)
            elif step == "up":
                cur = upsample_nearest2x(cur)
            else:  # cat
                cur = concat_channels([cur, saved[arg]])
        return cur

    def _layer_forward(self, lid, x, adapters, mode):
        spec = self.layers[lid]
        f = conv2d_forward(x, self.conv[lid])
        if self.fused.get(lid):
            return relu(f) if spec.kind == "conv3x3" else f
        if adapters is not None and lid in adapters:
            f = add(f, adapters[lid].forward(f, mode))
        if spec.followed_by_bn:
            bn = self.bn[lid]
            f = batchnorm_forward(f, bn, training=(mode == "train" and bn.gamma.requires_grad))
        return relu(f) if spec.kind == "conv3x3" else f

    def normalize(self, images: np.ndarray) -> Tensor:
        """u8/float (n, h, w) images -> normalized (n, 1, h, w) input tensor."""
        a = np.asarray(images, dtype=np.float32)
        if a.ndim == 2:
            a = a[None]
        return Tensor(((a - self.norm_mean) / self.norm_std)[:, None])

    def predict(self, images: np.ndarray, adapters=None) -> np.ndarray:
        logits = self.forward(self.normalize(images), adapters=adapters, mode="eval")
        return logits.data.argmax(axis=1).astype(np.uint8)

    # -- accounting -------------------------------------------------------

    def count_costs(self, adapters=None, input_hw=(48, 48)) -> CostReport:
        flops = 0
        h, w = input_hw
        chans = {}
        for step, arg in self._plan:
            if step == "conv":
                spec = self.layers[arg]
                p = self.conv[arg]
                ho = (h + 2 * p.padding - p.kernel) // p.stride + 1
                wo = (w + 2 * p.padding - p.kernel) // p.stride + 1
                elems = spec.c_out * ho * wo
                flops += 2 * p.kernel * p.kernel * spec.c_in * spec.c_out * ho * wo
                if adapters is not None and not self.fused.get(arg) and arg in adapters:
                    flops += adapters[arg].flops(ho * wo)
                    flops += elems  # residual add
                if spec.followed_by_bn and not self.fused.get(arg):
                    flops += 2 * elems
                elif p.bias is not None:
                    flops += 2 * elems
                if spec.kind == "conv3x3":
                    flops += elems  # ReLU
                h, w = ho, wo
            elif step == "save":
                chans[arg] = None
            elif step == "pool":
                h, w = h // 2, w // 2
            elif step == "up":
                h, w = h * 2, w * 2

        total = sum(t.data.size for t in self.param_registry().values())
        trainable = sum(t.data.size for t in self.param_registry().values() if t.requires_grad)
        storage = len(model_to_bytes(self))
        if adapters is not None:
            from . import update_pack

            for a in adapters.values():
                total += a.param_count()
                trainable += a.trainable_param_count()
            storage += update_pack.pack_nbytes(adapters)
        return CostReport(total, trainable, flops, storage)

    def layout_hash(self) -> int:
        """FNV-1a 64 over the layer table, skips and parameter shapes."""
        acc = 0xCBF29CE484222325
        data = _descriptor_layout_bytes(self)
        for name, t in self.param_registry().items():
            data += name.encode() + struct.pack("<B", len(t.shape))
            data += struct.pack(f"<{len(t.shape)}I", *t.shape)
        for b in data:
            acc ^= b
            acc = (acc * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return acc


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def build_micro_unet(in_channels=1, encoder=(8, 16), bottleneck=32,
                     decoder=(16, 8), n_classes=3, seed=0) -> MicroUNet:
    """Build and He-initialize the default architecture."""
    layers, skips = _default_layer_table(in_channels, encoder, bottleneck, decoder, n_classes)
    rng = Stream(derive(seed, 0xD0))
    conv, bn = {}, {}
    for spec in layers:
        k = 3 if spec.kind == "conv3x3" else 1
        fan_in = spec.c_in * k * k
        wdata = (rng.normal_array(spec.c_out * fan_in) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        weight = Tensor(wdata.reshape(spec.c_out, spec.c_in, k, k), requires_grad=True)
        if spec.followed_by_bn:
            conv[spec.id] = ConvParams(weight, bias=None, stride=1, padding=1)
            bn[spec.id] = make_bn(spec.c_out)
        else:
            bias = Tensor(np.zeros(spec.c_out, dtype=np.float32), requires_grad=True)
            conv[spec.id] = ConvParams(weight, bias=bias, stride=1, padding=0)
    fused = {spec.id: False for spec in layers}
    return MicroUNet(layers, conv, bn, skips, fused)


def _default_layer_table(in_channels, encoder, bottleneck, decoder, n_classes):
    layers = []
    lid = 0

    def conv_layer(c_in, c_out, stage, kind="conv3x3", with_bn=True):
        nonlocal lid
        layers.append(LayerSpec(lid, kind, c_in, c_out, with_bn, stage))
        lid += 1
        return lid - 1

    skip_srcs = []
    c = in_channels
    for ch in encoder:
        conv_layer(c, ch, "encoder")
        skip_srcs.append(conv_layer(ch, ch, "encoder"))
        c = ch
    conv_layer(c, bottleneck, "bottleneck")
    conv_layer(bottleneck, bottleneck, "bottleneck")
    c = bottleneck
    skips = []
    for ch, src in zip(decoder, reversed(skip_srcs)):
        first = conv_layer(c + layers[src].c_out, ch, "decoder")
        skips.append((src, first))
        conv_layer(ch, ch, "decoder")
        c = ch
    conv_layer(c, n_classes, "head", kind="conv1x1_head", with_bn=False)
    return layers, skips


def _build_plan(layers, skip_links):
    """Derive the dataflow (convs interleaved with pool/up/cat) from the table."""
    src_after = {src for src, _ in skip_links}
    cat_before = {dst: src for src, dst in skip_links}
    plan = []
    prev_stage = None
    for spec in layers:
        if spec.stage == "decoder" and spec.id in cat_before:
            plan.append(("up", None))
            plan.append(("cat", cat_before[spec.id]))
        if prev_stage == "encoder" and spec.stage != "encoder" and plan and plan[-1][0] != "pool":
            plan.append(("pool", None))
        plan.append(("conv", spec.id))
        if spec.id in src_after:
            plan.append(("save", spec.id))
            if spec.stage == "encoder":
                nxt = layers[spec.id + 1] if spec.id + 1 < len(layers) else None
                if nxt is not None and nxt.stage == "encoder":
                    plan.append(("pool", None))
        prev_stage = spec.stage
    return plan


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _descriptor_layout_bytes(model: MicroUNet) -> bytes:
    out = struct.pack("<H", len(model.layers))
    for spec in model.layers:
        flags = 0
        if spec.followed_by_bn:
            flags |= 1
        if model.fused.get(spec.id):
            flags |= 2
        if model.conv[spec.id].bias is not None:
            flags |= 4
        out += struct.pack(
            "<HBHHBB",
            spec.id, _KINDS.index(spec.kind), spec.c_in, spec.c_out,
            flags, _STAGES.index(spec.stage),
        )
    out += struct.pack("<H", len(model.skip_links))
    for src, dst in model.skip_links:
        out += struct.pack("<HH", src, dst)
    return out


def model_to_bytes(model: MicroUNet) -> bytes:
    body = MAGIC + struct.pack("<H", FORMAT_VERSION)
    body += _descriptor_layout_bytes(model)
    body += struct.pack("<ffff", model.bn_eps, model.bn_momentum,
                        model.norm_mean, model.norm_std)
    for spec in model.layers:
        p = model.conv[spec.id]
        body += np.ascontiguousarray(p.weight.data, dtype="<f4").tobytes()
        if p.bias is not None:
            body += np.ascontiguousarray(p.bias.data, dtype="<f4").tobytes()
        if spec.id in model.bn:
            b = model.bn[spec.id]
            for arr in (b.gamma.data, b.beta.data, b.running_mean, b.running_var):
                body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> MicroUNet:
    if len(data) < 10 or data[:4] != MAGIC:
        raise StateError("not a MUNT model file")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise StateError("model file CRC mismatch")
    off = 4
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != FORMAT_VERSION:
        raise StateError(f"unsupported model format version {version}")
    (n_layers,) = struct.unpack_from("<H", data, off)
    off += 2
    layers, flag_list = [], []
    for _ in range(n_layers):
        lid, kind, c_in, c_out, flags, stage = struct.unpack_from("<HBHHBB", data, off)
        off += 9
        layers.append(LayerSpec(lid, _KINDS[kind], c_in, c_out, bool(flags & 1), _STAGES[stage]))
        flag_list.append(flags)
    (n_skips,) = struct.unpack_from("<H", data, off)
    off += 2
    skips = []
    for _ in range(n_skips):
        src, dst = struct.unpack_from("<HH", data, off)
        off += 4
        skips.append((src, dst))
    bn_eps, bn_mom, norm_mean, norm_std = struct.unpack_from("<ffff", data, off)
    off += 16

    def read_f32(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).copy()
        off += 4 * count
        return arr

    conv, bn, fused = {}, {}, {}
    for spec, flags in zip(layers, flag_list):
        k = 3 if spec.kind == "conv3x3" else 1
        weight = Tensor(read_f32(spec.c_out * spec.c_in * k * k).reshape(
            spec.c_out, spec.c_in, k, k), requires_grad=True)
        bias = None
        if flags & 4:
            bias = Tensor(read_f32(spec.c_out), requires_grad=True)
        conv[spec.id] = ConvParams(weight, bias=bias, stride=1,
                                   padding=1 if k == 3 else 0)
        if spec.followed_by_bn:
            bn[spec.id] = BatchNormParams(
                gamma=Tensor(read_f32(spec.c_out), requires_grad=True),
                beta=Tensor(read_f32(spec.c_out), requires_grad=True),
                running_mean=read_f32(spec.c_out),
                running_var=read_f32(spec.c_out),
                eps=float(bn_eps), momentum=float(bn_mom),
            )
        fused[spec.id] = bool(flags & 2)
    return MicroUNet(layers, conv, bn, skips, fused, float(bn_eps),
                     float(bn_mom), norm_mean, norm_std)


def save_model(model: MicroUNet, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> MicroUNet:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
