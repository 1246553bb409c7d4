"""Adapter importance scores, budgeted selection and Pareto curve export.

The default score is the squared L2 norm of an adapter's 1x1 conv weights
and bias divided by their count - average squared magnitude per parameter.
A zero conv makes the adapter exactly inert whatever its BN holds, which is
why BN affine terms stay out of the norm by default (``include_bn`` adds
them back for the ablation).  Ranking is descending score; ties go to the
shallower layer.  Selection keeps the smallest score-ordered prefix whose
validation balanced accuracy is within ``budget_drop`` (absolute, default
0.005 = 0.5 points) of the best prefix on the curve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .adapters import Adapter, AdapterSet
from .metrics import model_balanced_accuracy

SCORE_KINDS = ("sq_norm", "param_count", "sq_norm_per_param")


@dataclass
class AdapterScore:
    layer_id: int
    score_kind: str
    value: float
    param_bytes: int


def score_adapter(adapter: Adapter, kind: str = "sq_norm_per_param",
                  include_bn: bool = False) -> AdapterScore:
    if kind not in SCORE_KINDS:
        raise ValueError(f"unknown score kind {kind!r}")
    parts = []
    for cv in adapter.convs:
        parts.append(cv.weight.data.ravel())
        parts.append(cv.bias.data.ravel())
    if include_bn:
        for bn in adapter.bns:
            parts.append(bn.gamma.data.ravel())
            parts.append(bn.beta.data.ravel())
    flat = np.concatenate(parts).astype(np.float64)
    sq = float(np.dot(flat, flat))
    if kind == "sq_norm":
        value = sq
    elif kind == "param_count":
        value = float(adapter.trainable_param_count())
    else:
        value = sq / flat.size
    from . import update_pack

    return AdapterScore(adapter.layer_id, kind, value,
                        update_pack.record_nbytes(adapter))


@dataclass
class SelectionResult:
    ordered_layer_ids: list
    scores: list                  # AdapterScore, in rank order
    chosen_prefix_len: int
    curve: list                   # (cumulative_params, balanced_accuracy), k = 0..K
    cumulative_bytes: list
    budget_drop: float
    score_kind: str

    @property
    def chosen_ids(self):
        return self.ordered_layer_ids[:self.chosen_prefix_len]

    def reach_size(self, drop: float | None = None) -> int:
        """Smallest cumulative param count whose BA is within `drop` of the
        curve's maximum."""
        drop = self.budget_drop if drop is None else drop
        best = max(ba for _, ba in self.curve)
        for params, ba in self.curve:
            if ba >= best - drop:
                return params
        return self.curve[-1][0]

    def to_json_dict(self):
        return {
            "score_kind": self.score_kind,
            "budget_drop": self.budget_drop,
            "ordered_layer_ids": list(self.ordered_layer_ids),
            "scores": [{"layer_id": s.layer_id, "value": s.value,
                        "param_bytes": s.param_bytes} for s in self.scores],
            "chosen_prefix_len": self.chosen_prefix_len,
            "chosen_layer_ids": list(self.chosen_ids),
            "curve": [{"k": k, "cumulative_params": int(p),
                       "cumulative_bytes": int(b), "balanced_accuracy": ba}
                      for k, ((p, ba), b) in enumerate(zip(self.curve, self.cumulative_bytes))],
        }


def rank_and_select(model, adapters: AdapterSet, val_scenes,
                    kind: str = "sq_norm_per_param", budget_drop: float = 0.005,
                    include_bn: bool = False) -> SelectionResult:
    """Score, rank, trace the BA-vs-size curve and pick the budgeted prefix.

    Deselected adapters are removed outright (the layer falls back to its
    plain conv->BN path), not zeroed and kept.
    """
    if not val_scenes:
        raise ValueError("validation set must be non-empty")
    scored = [score_adapter(adapters[lid], kind, include_bn) for lid in adapters.layer_ids()]
    scored.sort(key=lambda s: (-s.value, s.layer_id))
    order = [s.layer_id for s in scored]

    curve, cum_bytes = [], []
    cum_p = cum_b = 0
    for k in range(len(order) + 1):
        subset = adapters.subset(order[:k]) if k else None
        ba = model_balanced_accuracy(model, val_scenes, adapters=subset)
        if k:
            picked = adapters[order[k - 1]]
            cum_p += picked.trainable_param_count()
            cum_b += scored[k - 1].param_bytes
        curve.append((cum_p, ba))
        cum_bytes.append(cum_b)

    best = max(ba for _, ba in curve)
    chosen = next(k for k, (_, ba) in enumerate(curve) if ba >= best - budget_drop)
    return SelectionResult(order, scored, chosen, curve, cum_bytes, budget_drop, kind)


def pareto_csv(result: SelectionResult) -> str:
    lines = ["k,cumulative_params,cumulative_bytes,balanced_accuracy"]
    for k, ((params, ba), nbytes) in enumerate(zip(result.curve, result.cumulative_bytes)):
        lines.append("%d,%d,%d,%.6f" % (k, params, nbytes, ba))
    return "\n".join(lines) + "\n"


def save_selection(result: SelectionResult, json_path, csv_path):
    with open(json_path, "w") as fh:
        json.dump(result.to_json_dict(), fh, indent=2, sort_keys=True)
    with open(csv_path, "w") as fh:
        fh.write(pareto_csv(result))


def load_selection_ids(json_path) -> list:
    with open(json_path) as fh:
        return list(json.load(fh)["chosen_layer_ids"])
