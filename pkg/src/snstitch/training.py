"""Solo anchor pretraining and joint stitched training with budget-aware sampling."""
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import anchors as nn
from . import budget
from .errors import ShapeError, TrainingDiverged
from .linalg import make_rng
from .stitching import LARGE, SMALL, backward_stitched, forward_stitched, init_layers

log = logging.getLogger(__name__)

SAMPLERS = ("ros", "uniform")
STITCH_MODES = ("lora", "full", "frozen")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_scale_anchors: float = 1.0
    weight_decay: float = 0.05
    sampler: str = "ros"
    stitch_layer_mode: str = "lora"
    lora_rank: int = 16
    lora_b_std: float = 0.02
    calib_samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate < 0 or self.lr_scale_anchors < 0:
            raise ValueError("learning rates must be non-negative")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.stitch_layer_mode not in STITCH_MODES:
            raise ValueError(f"stitch_layer_mode must be one of {STITCH_MODES}")
        if self.stitch_layer_mode == "lora" and self.lora_rank < 1:
            raise ValueError("lora mode needs lora_rank >= 1")
        if self.calib_samples < 1:
            raise ValueError("calib_samples must be positive")


class AdamW:
    """Adam with decoupled weight decay on tensors of rank >= 2.

    State is created lazily per key, and each key keeps its own step count, so
    a tensor that receives no gradient in an iteration is left untouched.
    """

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, params, grads, lr_scale=None):
        for key, g in grads.items():
            p = params[key]
            if g.shape != p.shape:
                raise ShapeError(f"{key}: gradient {g.shape} vs parameter {p.shape}")
            m, v, t = self.state.get(key) or (np.zeros_like(p), np.zeros_like(p), 0)
            t += 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            self.state[key] = (m, v, t)
            lr = self.lr * (lr_scale(key) if lr_scale else 1.0)
            if self.weight_decay and p.ndim >= 2:
                p *= 1.0 - lr * self.weight_decay
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def step(optimizer, params, grads):
    return optimizer.step(params, grads)


class BatchStream:
    """Endless minibatches; each epoch is a fresh seeded permutation."""

    def __init__(self, dataset, batch_size, rng):
        self.dataset = dataset
        self.batch_size = min(batch_size, len(dataset))
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.dataset))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.dataset.x[idx], self.dataset.y[idx]


def sub_rng(seed, name):
    """Independent generator per named consumer of randomness."""
    streams = {"data": 0, "init_small": 1, "init_large": 2, "batches": 3,
               "sampler": 4, "lora": 5, "calib": 6}
    return make_rng([int(seed), streams[name]])


def pretrain_anchor(model, data, cfg):
    """Train one anchor on its own. Returns ``(model, per-iteration losses)``."""
    opt = AdamW(cfg.learning_rate, weight_decay=cfg.weight_decay)
    stream = BatchStream(data, cfg.batch_size, sub_rng(cfg.seed, "batches"))
    params = dict(model.named_parameters())
    losses = []
    for it in range(cfg.iterations):
        xb, yb = stream.next()
        result = nn.forward(model, xb)
        loss, dlogits = nn.cross_entropy(result.logits, yb)
        if not math.isfinite(loss):
            raise TrainingDiverged(it, last_good=it - 1 if it else None)
        opt.step(params, nn.backward(model, result, dlogits))
        losses.append(loss)
    return model, losses


def trainable_params(space, small, large, mode):
    """Qualified-name table of every tensor the optimizer may touch."""
    table = {f"{SMALL}.{k}": v for k, v in small.named_parameters()}
    table.update({f"{LARGE}.{k}": v for k, v in large.named_parameters()})
    for cid, layer in space.layers.items():
        tensors = layer.tensors()
        if mode == "lora":
            if layer.B is None:
                raise ValueError(f"lora mode but layer {cid.key} has no low-rank factors")
            keep = ("B", "A")
        elif mode == "full":
            keep = ("M", "B", "A")
        else:
            keep = ()
        for name in keep:
            if name in tensors:
                table[f"stitch.{cid.key}.{name}"] = tensors[name]
    return table


def train_snnet(space, small, large, data, cfg, dist=None, cost=None, on_record=None):
    """Jointly train every stitch, one sampled route per iteration.

    Stitching layers are least-squares initialised first if the space has none.
    In ``lora`` mode only the low-rank factors of stitching layers are trained.
    Returns the list of log records ``{iter, tau0, config_id, loss}``.
    """
    if not space.layers:
        calib = data.x[:cfg.calib_samples]
        rank = cfg.lora_rank if cfg.stitch_layer_mode == "lora" else 0
        init_layers(space, small, large, calib, rank=rank,
                    rng=sub_rng(cfg.seed, "lora"), b_std=cfg.lora_b_std)
    if dist is None:
        cost = cost or budget.CostModel(space.small, space.large)
        dist = budget.build_distribution(space, cost, budget.auto_step(space, cost))

    params = trainable_params(space, small, large, cfg.stitch_layer_mode)
    anchor_scale = cfg.lr_scale_anchors

    def lr_scale(key):
        return 1.0 if key.startswith("stitch.") else anchor_scale

    opt = AdamW(cfg.learning_rate, weight_decay=cfg.weight_decay)
    stream = BatchStream(data, cfg.batch_size, sub_rng(cfg.seed, "batches"))
    sampler_rng = sub_rng(cfg.seed, "sampler")
    records = []
    for it in range(cfg.iterations):
        xb, yb = stream.next()
        if cfg.sampler == "ros":
            cid = budget.ros_sample(dist, sampler_rng)
        else:
            cid = budget.uniform_sample(space, sampler_rng)
        result = forward_stitched(space, cid, small, large, xb)
        loss, dlogits = nn.cross_entropy(result.logits, yb)
        if not math.isfinite(loss):
            raise TrainingDiverged(it, config_id=cid, last_good=it - 1 if it else None)
        grads = backward_stitched(result, dlogits)
        opt.step(params, {k: g for k, g in grads.items() if k in params}, lr_scale)
        rec = {"iter": it, "tau0": dist.bin_of(cid).tau0, "config_id": cid, "loss": loss}
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if it % 500 == 0:
            log.debug("iter %d config %d loss %.4f", it, cid, loss)
    return records
