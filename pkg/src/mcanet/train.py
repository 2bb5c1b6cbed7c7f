"""Loss, optimizers, and the training/evaluation loops.

Training is a pure function of (seed, config, data): model init, batch
shuffling, and every update are derived from the config seed, so repeated
runs produce byte-identical checkpoints. A single-channel head trains with
sigmoid cross-entropy; multi-channel heads with pixel-wise softmax
cross-entropy. Both are log-sum-exp stabilized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, build_model
from .data import SegSample, synth_generate
from .decoder import MCANet
from .errors import DataError, ShapeError
from .metrics import ConfusionCounts, MetricsReport, confusion, hausdorff, model_stats, scores
from .tensor import Tensor, backward, clear_graph, no_grad, precision, record, tensor

__all__ = [
    "cross_entropy_loss",
    "AdamW",
    "SGD",
    "make_optimizer",
    "train",
    "evaluate",
    "predict_labels",
    "task_mode",
]


def task_mode(num_classes: int) -> str:
    return "binary" if num_classes == 1 else "multiclass"


# ---------------------------------------------------------------------------
# loss


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def cross_entropy_loss(logits: Tensor, mask: np.ndarray, mode: str) -> Tensor:
    """Mean pixel-wise cross-entropy; scalar, differentiable in the logits."""
    mask = np.asarray(mask)
    if logits.ndim != 4 or mask.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"logits {logits.shape} vs mask {mask.shape}")
    dt = logits.data.dtype
    if mode == "binary":
        if logits.shape[1] != 1:
            raise ShapeError(f"binary loss expects one channel, got {logits.shape[1]}")
        if mask.min() < 0 or mask.max() > 1:
            raise DataError("binary labels must be 0 or 1")
        z = logits.data[:, 0]
        y = mask.astype(dt)
        loss = np.asarray((_softplus(z) - z * y).mean(dtype=dt))

        def bwd(g):
            sig = 1.0 / (1.0 + np.exp(-z))
            gz = (sig - y) * (g / z.size)
            return (gz[:, None].astype(dt),)

        return record("bce", (logits,), loss, bwd)

    if mode == "multiclass":
        k = logits.shape[1]
        if mask.min() < 0 or mask.max() >= k:
            raise DataError(f"labels must lie in [0, {k})")
        z = logits.data
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        z_true = np.take_along_axis(z, mask[:, None], axis=1)[:, 0]
        npix = lse.size
        loss = np.asarray((lse - z_true).mean(dtype=dt))

        def bwd(g):
            e = np.exp(z - zmax)
            soft = e / e.sum(axis=1, keepdims=True)
            onehot_idx = mask[:, None]
            np.put_along_axis(soft, onehot_idx, np.take_along_axis(soft, onehot_idx, 1) - 1.0, 1)
            return ((soft * (g / npix)).astype(dt),)

        return record("cross_entropy", (logits,), loss, bwd)

    raise DataError(f"mode must be 'binary' or 'multiclass', got {mode!r}")


# ---------------------------------------------------------------------------
# optimizers


class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 betas=(0.9, 0.999), weight_decay: float = 1e-4, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def step(self) -> str | None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                return f"non-finite gradient in {name}; step rejected"
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.wd:
                p.data = p.data - (self.lr * self.wd) * p.data
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return None


class SGD:
    """Classical momentum with decoupled weight decay."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.wd = weight_decay
        self.buf = [np.zeros_like(p.data) for _, p in params]

    def step(self) -> str | None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                return f"non-finite gradient in {name}; step rejected"
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.wd:
                p.data = p.data - (self.lr * self.wd) * p.data
            self.buf[i] = self.momentum * self.buf[i] + g
            p.data = p.data - self.lr * self.buf[i]
        return None


def make_optimizer(model: MCANet, cfg) -> AdamW | SGD:
    params = list(model.named_parameters())
    if cfg.optimizer == "adamw":
        return AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    return SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# loops


class _BatchCycler:
    """Cycles over sample indices, reshuffling each pass with a seeded rng."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch = batch_size
        self.rng = rng
        self.queue: list[int] = []

    def next_indices(self) -> list[int]:
        out = []
        while len(out) < self.batch:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.n))
            out.append(self.queue.pop())
        return out


def _stack_batch(samples: list[SegSample], indices, dtype) -> tuple[Tensor, np.ndarray]:
    imgs = np.stack([samples[i].image.data for i in indices]).astype(dtype)
    masks = np.stack([samples[i].mask for i in indices])
    return Tensor(np.ascontiguousarray(imgs)), masks


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    log: list[dict]
    aborted: bool = False


def train(cfg: RunConfig, data: list[SegSample],
          log_path: str | Path | None = None) -> TrainResult:
    """Run the configured optimization; returns final weights and a log.

    The log holds one record per iteration (iteration, loss) plus periodic
    validation metrics; with ``log_path`` set, records stream to disk as
    JSON lines. If the loss goes non-finite the run aborts and the weights
    from the last finite step are returned.
    """
    if not data:
        raise DataError("training data is empty")
    t = cfg.train
    mode = task_mode(cfg.variant.decoder.num_classes)
    n_val = int(round(len(data) * t.val_fraction))
    train_split = data[:len(data) - n_val] if n_val else data
    val_split = data[len(data) - n_val:] if n_val else []

    log: list[dict] = []
    sink = open(log_path, "w") if log_path else None

    def emit(rec: dict) -> None:
        log.append(rec)
        if sink:
            sink.write(json.dumps(rec) + "\n")

    try:
        with precision(t.precision):
            seeds = np.random.SeedSequence(t.seed).spawn(2)
            model = build_model(cfg.variant, seed=t.seed)
            opt = make_optimizer(model, t)
            cycler = _BatchCycler(len(train_split), t.batch_size,
                                  np.random.default_rng(seeds[1]))
            dtype = model.encoder.stem1.weight.data.dtype
            aborted = False
            for it in range(t.iterations):
                if t.lr_decay:
                    frac = 1.0 - it / t.iterations
                    opt.lr = t.lr * frac
                idx = cycler.next_indices()
                images, masks = _stack_batch(train_split, idx, dtype)
                clear_graph()
                model.zero_grad()
                logits = model.forward(images)
                loss = cross_entropy_loss(logits, masks, mode)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    emit({"iteration": it, "event": "abort",
                          "reason": f"non-finite loss {loss_val}"})
                    aborted = True
                    break
                backward(loss)
                diag = opt.step()
                rec = {"iteration": it, "loss": loss_val}
                if diag:
                    rec["event"] = "step_rejected"
                    rec["reason"] = diag
                if (t.eval_interval and val_split
                        and (it + 1) % t.eval_interval == 0):
                    with no_grad():
                        report = evaluate(model, val_split, with_stats=False)
                    rec["val_miou"] = report.miou
                    rec["val_mdice"] = report.mdice
                emit(rec)
            clear_graph()
            state = {name: p.data.astype("<f4", copy=True)
                     for name, p in model.named_parameters()}
        return TrainResult(state=state, log=log, aborted=aborted)
    finally:
        if sink:
            sink.close()


def predict_labels(model: MCANet, images: Tensor) -> np.ndarray:
    """Threshold (binary) or argmax (multiclass) the logits into labels."""
    with no_grad():
        logits = model.forward(images)
    z = logits.data
    if model.num_classes == 1:
        prob = 1.0 / (1.0 + np.exp(-z[:, 0]))
        return (prob > 0.5).astype(np.int64)
    return z.argmax(axis=1).astype(np.int64)


def evaluate(model: MCANet, data: list[SegSample], batch_size: int = 8,
             hd_percentiles=(100.0, 95.0), with_stats: bool = True) -> MetricsReport:
    """Dataset-level metrics: confusion-based scores over all pixels plus
    mean per-sample Hausdorff distances over foreground classes."""
    if not data:
        raise DataError("evaluation data is empty")
    k = max(model.num_classes, 2)
    total = ConfusionCounts(np.zeros(k, np.int64), np.zeros(k, np.int64),
                            np.zeros(k, np.int64))
    hd_sums = [0.0 for _ in hd_percentiles]
    hd_count = 0
    hd_flags: list[str] = []
    dtype = model.encoder.stem1.weight.data.dtype
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        images, masks = _stack_batch(chunk, range(len(chunk)), dtype)
        preds = predict_labels(model, images)
        for offset, (pred, gt) in enumerate(zip(preds, masks)):
            total = total + confusion(pred, gt, k)
            for cls in range(1, k):
                results = [hausdorff(pred == cls, gt == cls, pct)
                           for pct in hd_percentiles]
                for i, res in enumerate(results):
                    hd_sums[i] += res.distance
                hd_count += 1
                if results[0].flag:
                    hd_flags.append(f"sample{start + offset}:class{cls}:{results[0].flag}")
    mode = task_mode(model.num_classes)
    report = scores(total, mode)
    report.hd = hd_sums[0] / max(hd_count, 1)
    report.hd95 = hd_sums[1] / max(hd_count, 1) if len(hd_percentiles) > 1 else report.hd
    report.hd_flags = hd_flags
    if with_stats:
        h, w = data[0].mask.shape
        report.params, report.flops = model_stats(model, h, w)
    return report


def generate_from_config(cfg: RunConfig) -> list[SegSample]:
    """Materialize the synthetic dataset described by the config."""
    d = cfg.train.data
    return synth_generate(d.seed, d.count, d.height, d.width,
                          task=d.task, num_labels=d.num_labels)
