"""Residual per-layer adapters and training-strategy freeze masks.

An adapter is a small correction module inserted between a host conv layer
and its BatchNorm: the host feature map passes through the adapter's own BN
and a full CxC 1x1 convolution (bias included), and the result is added back
onto the host features.  Freshly built adapters are exact identities: the
1x1 weights and bias start at zero, so the adapted network reproduces the
host network bit-for-bit until training moves the adapter away from zero.

Four designs are supported; fusion into the backbone is only possible for
the ones without a ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError
from .tensor import ConvParams, Tensor, batchnorm_forward, conv2d_forward, make_bn, relu


class AdapterDesign(Enum):
    BN_CONV = "bn_conv"                  # default; fusable
    BN_RELU_CONV = "bn_relu_conv"        # not fusable
    CONV_BN = "conv_bn"                  # fusable
    BN_CONV_BN_CONV = "bn_conv_bn_conv"  # fusable

    @property
    def stages(self):
        return {
            AdapterDesign.BN_CONV: ("bn", "conv"),
            AdapterDesign.BN_RELU_CONV: ("bn", "relu", "conv"),
            AdapterDesign.CONV_BN: ("conv", "bn"),
            AdapterDesign.BN_CONV_BN_CONV: ("bn", "conv", "bn", "conv"),
        }[self]

    @property
    def has_relu(self):
        return "relu" in self.stages

    @property
    def wire_id(self):
        return list(AdapterDesign).index(self)


@dataclass
class Adapter:
    """One correction module; channel count matches the host layer's output."""

    layer_id: int
    design: AdapterDesign
    bns: list       # BatchNormParams, one per "bn" stage
    convs: list     # ConvParams (1x1, biased), one per "conv" stage

    @property
    def channels(self):
        return self.convs[0].c_out

    def forward(self, x: Tensor, mode: str) -> Tensor:
        bn_i = conv_i = 0
        out = x
        for stage in self.design.stages:
            if stage == "bn":
                bn = self.bns[bn_i]
                out = batchnorm_forward(out, bn, training=(mode == "train" and bn.gamma.requires_grad))
                bn_i += 1
            elif stage == "conv":
                out = conv2d_forward(out, self.convs[conv_i])
                conv_i += 1
            else:
                out = relu(out)
        return out

    def param_registry(self, prefix=None):
        prefix = prefix or f"adapter{self.layer_id}"
        reg = {}
        for i, bn in enumerate(self.bns):
            reg[f"{prefix}.bn{i}.gamma"] = bn.gamma
            reg[f"{prefix}.bn{i}.beta"] = bn.beta
        for i, cv in enumerate(self.convs):
            reg[f"{prefix}.conv{i}.weight"] = cv.weight
            reg[f"{prefix}.conv{i}.bias"] = cv.bias
        return reg

    def trainable_param_count(self):
        return sum(t.data.size for t in self.param_registry().values() if t.requires_grad)

    def param_count(self):
        return sum(t.data.size for t in self.param_registry().values())

    def stored_param_count(self):
        """Parameters that must travel in an update: affine + running stats."""
        return self.param_count() + 2 * self.channels * len(self.bns)

    def flops(self, spatial):
        """Inference cost of the adapter body at `spatial` output positions."""
        c = self.channels
        total = 0
        for stage in self.design.stages:
            if stage == "bn":
                total += 2 * c * spatial
            elif stage == "conv":
                total += 2 * c * c * spatial + 2 * c * spatial  # GEMM + bias epilogue
            else:
                total += c * spatial
        return total

    def copy(self):
        from .tensor import BatchNormParams

        return Adapter(
            layer_id=self.layer_id,
            design=self.design,
            bns=[BatchNormParams(gamma=b.gamma.copy(), beta=b.beta.copy(),
                                 running_mean=b.running_mean.copy(),
                                 running_var=b.running_var.copy(),
                                 eps=b.eps, momentum=b.momentum) for b in self.bns],
            convs=[ConvParams(weight=c.weight.copy(), bias=c.bias.copy(),
                              stride=1, padding=0) for c in self.convs],
        )


class AdapterSet:
    """At most one adapter per host layer, keyed by layer id."""

    def __init__(self, adapters=(), domain_tag=""):
        self._by_layer = {}
        self.domain_tag = domain_tag
        for a in adapters:
            self.add(a)

    def add(self, adapter: Adapter):
        if adapter.layer_id in self._by_layer:
            raise ConfigError(f"layer {adapter.layer_id} already has an adapter")
        self._by_layer[adapter.layer_id] = adapter

    def __contains__(self, layer_id):
        return layer_id in self._by_layer

    def __getitem__(self, layer_id) -> Adapter:
        return self._by_layer[layer_id]

    def __len__(self):
        return len(self._by_layer)

    def layer_ids(self):
        return sorted(self._by_layer)

    def values(self):
        return [self._by_layer[i] for i in self.layer_ids()]

    def subset(self, layer_ids) -> "AdapterSet":
        return AdapterSet([self._by_layer[i] for i in layer_ids], self.domain_tag)

    def copy(self) -> "AdapterSet":
        return AdapterSet([a.copy() for a in self.values()], self.domain_tag)

    def param_registry(self):
        reg = {}
        for a in self.values():
            reg.update(a.param_registry())
        return reg

    def validate_against(self, model):
        for lid, a in self._by_layer.items():
            spec = next((s for s in model.layers if s.id == lid), None)
            if spec is None:
                raise ConfigError(f"adapter targets unknown layer {lid}")
            if spec.kind != "conv3x3" or not spec.followed_by_bn or model.fused.get(lid):
                raise ConfigError(f"layer {lid} cannot host an adapter")
            if a.channels != spec.c_out:
                raise ConfigError(
                    f"adapter at layer {lid} has {a.channels} channels, host has {spec.c_out}")


def make_adapters(model, design=AdapterDesign.BN_CONV, layer_filter="all",
                  domain_tag="") -> AdapterSet:
    """Build zero-initialized adapters for the given conv3x3+BN layers."""
    if layer_filter == "all":
        ids = [s.id for s in model.layers
               if s.kind == "conv3x3" and s.followed_by_bn and not model.fused.get(s.id)]
    else:
        ids = list(layer_filter)
    out = AdapterSet(domain_tag=domain_tag)
    for lid in ids:
        spec = next((s for s in model.layers if s.id == lid), None)
        if spec is None or spec.kind != "conv3x3" or not spec.followed_by_bn or model.fused.get(lid):
            raise ConfigError(f"layer {lid} cannot host an adapter (head or fused)")
        c = spec.c_out
        bns, convs = [], []
        for stage in design.stages:
            if stage == "bn":
                bns.append(make_bn(c, eps=model.bn_eps, momentum=model.bn_momentum))
            elif stage == "conv":
                convs.append(ConvParams(
                    weight=Tensor(np.zeros((c, c, 1, 1), dtype=np.float32), requires_grad=True),
                    bias=Tensor(np.zeros(c, dtype=np.float32), requires_grad=True),
                    stride=1, padding=0,
                ))
        out.add(Adapter(lid, design, bns, convs))
    out.validate_against(model)
    return out


PAPER_THETA_FACTOR = 5  # reference per-channel figure printed next to exact counts


def adapter_memory_report(adapters: AdapterSet) -> dict:
    """Exact per-adapter parameter accounting plus the 5*O(n) reference figure."""
    rows = {}
    for a in adapters.values():
        rows[a.layer_id] = {
            "channels": a.channels,
            "trainable_params": a.trainable_param_count(),
            "stored_params": a.stored_param_count(),
            "paper_theta": PAPER_THETA_FACTOR * a.channels,
        }
    totals = {
        "trainable_params": sum(r["trainable_params"] for r in rows.values()),
        "stored_params": sum(r["stored_params"] for r in rows.values()),
        "paper_theta": sum(r["paper_theta"] for r in rows.values()),
    }
    return {"per_adapter": rows, "totals": totals}


STRATEGIES = ("baseline", "scratch", "full", "encoder", "decoder", "batchnorm", "adapters_all")


def set_training_strategy(model, adapters, strategy: str) -> dict:
    """Flip requires_grad across the registries; returns the freeze mask."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if strategy == "adapters_all" and (adapters is None or len(adapters) == 0):
        raise ConfigError("strategy adapters_all needs a non-empty adapter set")

    stage_of = {s.id: s.stage for s in model.layers}

    def backbone_on(name):
        lid = int(name.split(".")[0][len("layer"):])
        if strategy in ("full", "scratch"):
            return True
        if strategy == "encoder":
            return stage_of[lid] in ("encoder", "bottleneck")
        if strategy == "decoder":
            return stage_of[lid] in ("decoder", "head")
        if strategy == "batchnorm":
            return ".bn." in name
        return False  # baseline, adapters_all

    mask = {}
    for name, t in model.param_registry().items():
        t.requires_grad = backbone_on(name)
        mask[name] = t.requires_grad
    if adapters is not None:
        adapter_on = strategy == "adapters_all"
        for name, t in adapters.param_registry().items():
            t.requires_grad = adapter_on
            mask[name] = t.requires_grad
    return mask
