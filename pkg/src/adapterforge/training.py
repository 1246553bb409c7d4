"""Losses, optimizers, LR schedule, augmentation and strategy-driven training.

The recipe: Adam from lr 1e-3, balanced categorical cross-entropy with class
weights N_total / (3 * N_c), learning rate cut by 10x whenever the validation
loss has not improved for `plateau_patience` epochs (at most 3 cuts, floored
at 1e-6), random-crop augmentation applied jointly to image and mask, and
the best-validation-loss checkpoint returned.

Freezing is strict: parameters with requires_grad=False receive no updates
and their BatchNorms keep running statistics untouched, so a fully frozen
model passes through training bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import AdapterSet, set_training_strategy
from .errors import ConfigError, DivergenceError, ShapeError
from .metrics import accumulate, balanced_accuracy, new_confusion
from .rng import Stream, derive
from .tensor import Tensor, backward
from .unet import MicroUNet


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_floor: float = 1e-6
    plateau_patience: int = 10
    lr_decay: float = 0.1
    max_lr_drops: int = 3
    max_epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"      # adam | sgdm
    loss: str = "bcce"           # bcce | dice | jaccard
    crop_prob: float = 0.5
    crop_size: tuple = (32, 32)
    hflip_prob: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.lr_decay < 1.0):
            raise ConfigError("lr_decay must lie in (0, 1)")
        if self.lr_floor > self.lr0:
            raise ConfigError("lr_floor must not exceed lr0")
        for p in (self.crop_prob, self.hflip_prob):
            if not (0.0 <= p <= 1.0):
                raise ConfigError("probabilities must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgdm"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("bcce", "dice", "jaccard"):
            raise ConfigError(f"unknown loss {self.loss!r}")


def class_weights(scenes) -> np.ndarray:
    """w_c = N_total / (3 * N_c) over the training split's mask pixels."""
    counts = np.zeros(3, dtype=np.int64)
    for s in scenes:
        counts += np.bincount(s.mask.ravel(), minlength=3)[:3]
    if (counts == 0).any():
        missing = [c for c in range(3) if counts[c] == 0]
        raise ValueError(f"classes {missing} absent from the training split")
    return counts.sum() / (3.0 * counts)


# --------------------------------------------------------------------------
# losses (closed-form gradients, checked against finite differences in tests)
# --------------------------------------------------------------------------


def _softmax64(logits):
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_target(logits, target):
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} != {(n, h, w)}")
    if target.min() < 0 or target.max() >= c:
        raise ValueError(f"target classes must lie in 0..{c - 1}")


def balanced_cce(logits: Tensor, target: np.ndarray, weights) -> Tensor:
    """Mean over pixels of w_y * (-log softmax(logits)_y)."""
    _check_target(logits.data, target)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (logits.shape[1],) or not np.all(np.isfinite(w)):
        raise ValueError("need one finite weight per class")
    p = _softmax64(logits.data)
    n, c, h, w_ = logits.shape
    npix = n * h * w_
    t = target.astype(np.int64)
    onehot = np.eye(c)[t].transpose(0, 3, 1, 2)
    py = np.take_along_axis(p, t[:, None], axis=1)[:, 0]
    wmap = w[t]
    value = float((wmap * -np.log(np.maximum(py, 1e-300))).sum() / npix)
    grad = (wmap[:, None] * (p - onehot) / npix).astype(np.float32)
    return _scalar_loss(value, logits, grad)


def _soft_overlap_loss(logits: Tensor, target: np.ndarray, jaccard: bool) -> Tensor:
    """Soft Dice/Jaccard: per-class averaged, 1 - score, smoothing delta=1."""
    _check_target(logits.data, target)
    p = _softmax64(logits.data)
    n, c, h, w = logits.shape
    t = np.eye(c)[target.astype(np.int64)].transpose(0, 3, 1, 2)
    axes = (0, 2, 3)
    inter = (p * t).sum(axis=axes)
    psum = p.sum(axis=axes)
    tsum = t.sum(axis=axes)
    delta = 1.0
    if jaccard:
        union = psum + tsum - inter
        score = (inter + delta) / (union + delta)
        # d(score_c)/dp_ic = [t*(union+d) - (inter+d)*(1-t)] / (union+d)^2
        dscore = (t * (union + delta)[None, :, None, None]
                  - (inter + delta)[None, :, None, None] * (1.0 - t)) \
            / (union + delta)[None, :, None, None] ** 2
    else:
        denom = psum + tsum + delta
        score = (2.0 * inter + delta) / denom
        dscore = (2.0 * t * denom[None, :, None, None]
                  - (2.0 * inter + delta)[None, :, None, None]) \
            / denom[None, :, None, None] ** 2
    value = float(1.0 - score.mean())
    dloss_dp = -dscore / c
    dot = (dloss_dp * p).sum(axis=1, keepdims=True)
    grad = (p * (dloss_dp - dot)).astype(np.float32)
    return _scalar_loss(value, logits, grad)


def dice_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    return _soft_overlap_loss(logits, target, jaccard=False)


def jaccard_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    return _soft_overlap_loss(logits, target, jaccard=True)


def _scalar_loss(value: float, logits: Tensor, grad: np.ndarray) -> Tensor:
    out = Tensor(np.float32(value))
    if logits.needs_grad():
        def grad_fn(g):
            from .tensor import _accum

            _accum(logits, float(g) * grad)
        out._parents = (logits,)
        out._backward = grad_fn
    return out


LOSSES = {"bcce": None, "dice": dice_loss, "jaccard": jaccard_loss}


def make_loss_fn(kind: str, weights):
    if kind == "bcce":
        return lambda logits, target: balanced_cce(logits, target, weights)
    return LOSSES[kind]


# --------------------------------------------------------------------------
# optimizers and schedule
# --------------------------------------------------------------------------


class OptimizerState:
    def __init__(self, kind: str):
        if kind not in ("adam", "sgdm"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.t = 0
        self.slots = {}

    def step(self, params: dict, lr: float):
        """Adam (b1=0.9, b2=0.999, eps=1e-8, bias-corrected) or SGD momentum 0.9."""
        self.t += 1
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            if self.kind == "adam":
                m, v = self.slots.get(name, (np.zeros_like(g), np.zeros_like(g)))
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                self.slots[name] = (m, v)
                mhat = m / (1.0 - 0.9 ** self.t)
                vhat = v / (1.0 - 0.999 ** self.t)
                upd = lr * mhat / (np.sqrt(vhat) + 1e-8)
            else:
                buf = self.slots.get(name, np.zeros_like(g))
                buf = 0.9 * buf + g
                self.slots[name] = buf
                upd = lr * buf
            p.data = (p.data.astype(np.float64) - upd).astype(np.float32)


def step_optimizer(params: dict, state: OptimizerState, lr: float):
    state.step(params, lr)


def plateau_schedule(val_losses, cfg: TrainConfig) -> float:
    """lr0 * decay^d where d counts exhausted patience windows (capped)."""
    best = math.inf
    bad = 0
    drops = 0
    for loss in val_losses:
        if loss < best:
            best = loss
            bad = 0
        else:
            bad += 1
            if bad >= cfg.plateau_patience:
                drops = min(drops + 1, cfg.max_lr_drops)
                bad = 0
    return max(cfg.lr0 * cfg.lr_decay ** drops, cfg.lr_floor)


# --------------------------------------------------------------------------
# augmentation and noise
# --------------------------------------------------------------------------


def augment(image: np.ndarray, mask: np.ndarray, cfg: TrainConfig, rng: Stream):
    """Joint geometric augmentation; class labels ride along untouched."""
    h, w = image.shape
    ch, cw = cfg.crop_size
    if ch > h or cw > w:
        raise ValueError(f"crop {cfg.crop_size} larger than image {image.shape}")
    if cfg.crop_prob > 0 and rng.f64() < cfg.crop_prob:
        top = rng.randint(0, h - ch)
        left = rng.randint(0, w - cw)
        rows = top + (np.arange(h) * ch) // h
        cols = left + (np.arange(w) * cw) // w
        image = image[np.ix_(rows, cols)]
        mask = mask[np.ix_(rows, cols)]
    if cfg.hflip_prob > 0 and rng.f64() < cfg.hflip_prob:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def apply_noise(image: np.ndarray, kind: str, level: float, rng: Stream) -> np.ndarray:
    """Sensor corruptions; the zero level is an exact no-op."""
    if kind == "gauss":
        if level == 0:
            return image.copy()
        noisy = image.astype(np.float64) + level * rng.normal_array(image.size).reshape(image.shape)
        return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    if kind == "blur":
        k = int(level)
        if k % 2 == 0:
            raise ValueError(f"blur kernel must be odd, got {k}")
        if k <= 1:
            return image.copy()
        from .classic import _gaussian_blur

        return np.clip(np.rint(_gaussian_blur(image, k)), 0, 255).astype(np.uint8)
    if kind == "bad_pxl":
        if level == 0:
            return image.copy()
        if not (0.0 <= level <= 1.0):
            raise ValueError("bad_pxl level is a pixel fraction in [0, 1]")
        out = image.copy().ravel()
        n_dead = round(level * out.size)
        idx = np.arange(out.size)
        for i in range(n_dead):  # partial Fisher-Yates: first n_dead are the sample
            j = rng.randint(i, out.size - 1)
            idx[i], idx[j] = idx[j], idx[i]
        out[idx[:n_dead]] = 0
        return out.reshape(image.shape)
    raise ConfigError(f"unknown noise kind {kind!r}")


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: MicroUNet
    adapters: AdapterSet | None
    history: list
    best_epoch: int
    freeze_mask: dict = field(default_factory=dict)

    def history_csv(self) -> str:
        lines = ["epoch,split,loss,ba,lr"]
        for row in self.history:
            lines.append("%d,%s,%.8f,%.6f,%.2e" % (
                row["epoch"], row["split"], row["loss"], row["ba"], row["lr"]))
        return "\n".join(lines) + "\n"


def reinit_model(model: MicroUNet, seed: int):
    """Fresh He initialization in place; BN affine/stats reset."""
    rng = Stream(derive(seed, 0xD0))
    for spec in model.layers:
        p = model.conv[spec.id]
        fan_in = spec.c_in * p.kernel * p.kernel
        w = rng.normal_array(p.weight.data.size) * np.sqrt(2.0 / fan_in)
        p.weight.data = w.astype(np.float32).reshape(p.weight.shape)
        if p.bias is not None:
            p.bias.data = np.zeros_like(p.bias.data)
        if spec.id in model.bn:
            b = model.bn[spec.id]
            b.gamma.data = np.ones_like(b.gamma.data)
            b.beta.data = np.zeros_like(b.beta.data)
            b.running_mean[:] = 0.0
            b.running_var[:] = 1.0


def train(model: MicroUNet, adapters: AdapterSet | None, strategy: str,
          train_scenes, val_scenes, cfg: TrainConfig) -> TrainResult:
    """Strategy-driven fit; returns the best-validation-loss checkpoint."""
    model = model.copy()
    adapters = adapters.copy() if adapters is not None else None
    if strategy == "scratch":
        reinit_model(model, cfg.seed)
        imgs = np.concatenate([s.image.ravel() for s in train_scenes]).astype(np.float64)
        model.norm_mean = float(imgs.mean())
        model.norm_std = float(max(imgs.std(), 1e-6))
    mask = set_training_strategy(model, adapters, strategy)
    return _fit(model, adapters, train_scenes, val_scenes, cfg, freeze_mask=mask)


def _trainable(model, adapters):
    reg = dict(model.param_registry())
    if adapters is not None:
        reg.update(adapters.param_registry())
    return {k: t for k, t in reg.items() if t.requires_grad}


def _val_pass(model, adapters, scenes, loss_fn, cfg):
    cm = new_confusion()
    losses = []
    for i in range(0, len(scenes), cfg.batch_size):
        chunk = scenes[i:i + cfg.batch_size]
        imgs = np.stack([s.image for s in chunk])
        targets = np.stack([s.mask for s in chunk])
        logits = model.forward(model.normalize(imgs), adapters=adapters, mode="eval")
        losses.append(float(loss_fn(logits, targets).data) * len(chunk))
        preds = logits.data.argmax(axis=1)
        for p, s in zip(preds, chunk):
            accumulate(cm, p, s.mask)
    return sum(losses) / len(scenes), balanced_accuracy(cm)


def _snapshot(model, adapters):
    return model.copy(), adapters.copy() if adapters is not None else None


def _fit(model, adapters, train_scenes, val_scenes, cfg, freeze_mask=None):
    if not train_scenes or not val_scenes:
        raise ValueError("need non-empty train and val scene lists")
    weights = class_weights(train_scenes)
    loss_fn = make_loss_fn(cfg.loss, weights)
    trainable = _trainable(model, adapters)

    history = []
    val_loss, val_ba = _val_pass(model, adapters, val_scenes, loss_fn, cfg)
    history.append({"epoch": 0, "split": "val", "loss": val_loss, "ba": val_ba, "lr": cfg.lr0})
    val_losses = [val_loss]
    best = _snapshot(model, adapters)
    best_loss, best_epoch = val_loss, 0

    if not trainable:
        return TrainResult(best[0], best[1], history, 0, freeze_mask or {})

    opt = OptimizerState(cfg.optimizer)
    order = list(range(len(train_scenes)))
    for epoch in range(1, cfg.max_epochs + 1):
        lr = plateau_schedule(val_losses, cfg)
        Stream(derive(cfg.seed, 0x50FF1E, epoch)).shuffle(order)
        cm = new_confusion()
        running = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch_ids = order[start:start + cfg.batch_size]
            imgs, targets = [], []
            for idx in batch_ids:
                sc = train_scenes[idx]
                im, mk = augment(sc.image, sc.mask, cfg,
                                 Stream(derive(cfg.seed, 0xA06, epoch, idx)))
                imgs.append(im)
                targets.append(mk)
            imgs = np.stack(imgs)
            targets = np.stack(targets)
            for t in trainable.values():
                t.grad = None
            logits = model.forward(model.normalize(imgs), adapters=adapters, mode="train")
            loss = loss_fn(logits, targets)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            backward(loss)
            opt.step(trainable, lr)
            running += float(loss.data) * len(batch_ids)
            preds = logits.data.argmax(axis=1)
            for p, tgt in zip(preds, targets):
                accumulate(cm, p, tgt)
        train_loss = running / len(order)
        history.append({"epoch": epoch, "split": "train", "loss": train_loss,
                        "ba": balanced_accuracy(cm), "lr": lr})
        val_loss, val_ba = _val_pass(model, adapters, val_scenes, loss_fn, cfg)
        history.append({"epoch": epoch, "split": "val", "loss": val_loss,
                        "ba": val_ba, "lr": lr})
        val_losses.append(val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best = _snapshot(model, adapters)

    return TrainResult(best[0], best[1], history, best_epoch, freeze_mask or {})


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


def layer_sweep(model: MicroUNet, train_scenes, val_scenes, cfg: TrainConfig):
    """Fine-tune one backbone layer at a time; first row is the frozen control."""
    weights = class_weights(train_scenes)
    loss_fn = make_loss_fn(cfg.loss, weights)
    _, base_ba = _val_pass(model, None, val_scenes, loss_fn, cfg)
    rows = [{"layer_id": -1, "ba": base_ba}]
    for spec in model.layers:
        m = model.copy()
        m.set_all_trainable(False)
        m.conv[spec.id].weight.requires_grad = True
        if m.conv[spec.id].bias is not None:
            m.conv[spec.id].bias.requires_grad = True
        if spec.id in m.bn:
            m.bn[spec.id].gamma.requires_grad = True
            m.bn[spec.id].beta.requires_grad = True
        res = _fit(m, None, train_scenes, val_scenes, cfg)
        best_val = max(r["ba"] for r in res.history if r["split"] == "val")
        rows.append({"layer_id": spec.id, "ba": best_val})
    return rows


def noise_sweep(model: MicroUNet, adapters, scenes, kind: str, levels, seed: int = 0):
    """Balanced accuracy as a function of corruption intensity."""
    lv = list(levels)
    if lv != sorted(lv):
        raise ValueError("levels must be sorted ascending")
    rows = []
    for li, level in enumerate(lv):
        cm = new_confusion()
        for si, sc in enumerate(scenes):
            img = apply_noise(sc.image, kind, level,
                              Stream(derive(seed, 0x4015E, li, si)))
            pred = model.predict(img[None], adapters=adapters)[0]
            accumulate(cm, pred, sc.mask)
        rows.append({"level": float(level), "ba": balanced_accuracy(cm)})
    return rows
