"""SGD training loop, evaluation and metrics for the micro video networks."""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .network import load_network, save_network


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    total_steps: int = 3000
    lr_drop_steps: list = None
    lr_drop_factor: float = 10.0
    eval_every: int = 500
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.lr_drop_steps is None:
            # tiny runs can map both default drops to the same step; keep one
            self.lr_drop_steps = sorted({int(0.6 * self.total_steps), int(0.85 * self.total_steps)})
        self.lr_drop_steps = [int(s) for s in self.lr_drop_steps]
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if any(b <= a for a, b in zip(self.lr_drop_steps, self.lr_drop_steps[1:])):
            raise ValueError("lr_drop_steps must be strictly increasing")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step, cfg):
    """Piecewise-constant schedule: divide by ``lr_drop_factor`` at each drop step."""
    drops = sum(1 for s in cfg.lr_drop_steps if step >= s)
    return cfg.lr / cfg.lr_drop_factor ** drops


def sgd_step(params, velocity, lr, momentum, weight_decay):
    """``v <- mu v + (g + wd * theta)``; ``theta <- theta - lr v``.

    Weight decay only touches params flagged ``decay`` (conv/linear weights).
    ``velocity`` is a list parallel to ``params`` and is updated in place.
    """
    for p, v in zip(params, velocity):
        g = p.grad + weight_decay * p.data if p.decay else p.grad
        v *= momentum
        v += g
        p.data -= lr * v


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / n``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def predict(net, x, batch_size=64):
    out = []
    for i in range(0, len(x), batch_size):
        out.append(net.forward(x[i:i + batch_size], train=False))
    return np.concatenate(out) if out else np.zeros((0, net.cfg.num_classes))


def evaluate(net, ds, batch_size=64):
    """Top-1 accuracy overall and per class kind."""
    pred = predict(net, ds.x, batch_size).argmax(axis=1)
    hit = pred == ds.y
    kinds = ds.sample_kinds()
    by_kind = {k: float(hit[kinds == k].mean()) for k in sorted(set(ds.kinds)) if np.any(kinds == k)}
    return float(hit.mean()), by_kind


def evaluate_multiclip(net, long_clip, n_clips):
    """Average softmax scores over ``n_clips`` evenly spaced temporal windows.

    ``long_clip`` is ``(1, L, h, w, c)`` or ``(L, h, w, c)``.
    """
    if long_clip.ndim == 4:
        long_clip = long_clip[None]
    t = net.cfg.input_shape[0]
    length = long_clip.shape[1]
    if length < t:
        raise ValueError(f"clip has {length} frames, network needs {t}")
    starts = np.round(np.linspace(0, length - t, n_clips)).astype(int) if n_clips > 1 else [0]
    windows = np.concatenate([long_clip[:, s:s + t] for s in starts])
    scores = T.softmax_rows(net.forward(windows, train=False))
    return scores.mean(axis=0)


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    val_top1: float
    val_top1_by_class_kind: dict = field(default_factory=dict)
    wall_ms: float = 0.0

    def row(self, include_timing=False):
        d = {"step": self.step, "train_loss": repr(self.train_loss), "val_top1": repr(self.val_top1)}
        for k in ("appearance", "motion", "mixed"):
            v = self.val_top1_by_class_kind.get(k)
            d[f"val_top1_{k}"] = "" if v is None else repr(v)
        if include_timing:
            d["wall_ms"] = f"{self.wall_ms:.1f}"
        return d


def metrics_csv(records, include_timing=False):
    buf = io.StringIO()
    rows = [r.row(include_timing) for r in records]
    fields = list(rows[0]) if rows else ["step", "train_loss", "val_top1"]
    w = csv.DictWriter(buf, fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def metrics_jsonl(records, include_timing=False):
    lines = []
    for r in records:
        d = asdict(r)
        if not include_timing:
            d.pop("wall_ms")
        lines.append(json.dumps(d, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def batch_indices(step, n, batch_size, seed):
    """Indices for ``step``; each epoch is a fresh permutation keyed by (seed, epoch).

    Stateless, so a resumed run sees exactly the batches it would have seen.
    """
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.extend(perm[offset:offset + batch_size - len(out)].tolist())
    return np.array(out)


@dataclass
class TrainResult:
    records: list
    best_val: float
    final_step: int


def _velocity_state(net, velocity):
    return {f"velocity/{name}": v for (name, _), v in zip(net.named_parameters(), velocity)}


def train(net, train_ds, val_ds, cfg, out_dir=None, start_step=0, velocity=None,
          stop_step=None, log=None):
    """Train ``net`` in place with SGD + momentum.

    Evaluates every ``cfg.eval_every`` steps and at the end. When ``out_dir``
    is given, writes the best-validation checkpoint to ``out_dir/best`` and the
    final state (including momentum buffers) to ``out_dir/last``.
    ``stop_step`` ends the run early (for checkpoint/resume) without changing
    the schedule.
    """
    dtype = np.dtype(cfg.dtype)
    params = net.parameters()
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    end = cfg.total_steps if stop_step is None else min(stop_step, cfg.total_steps)
    records = []
    best = -1.0
    t0 = time.perf_counter()
    losses = []
    for step in range(start_step, end):
        idx = batch_indices(step, len(train_ds), cfg.batch_size, cfg.seed)
        x = train_ds.x[idx].astype(dtype, copy=False)
        net.zero_grad()
        logits = net.forward(x, train=True)
        loss, dlogits = cross_entropy_loss(logits, train_ds.y[idx])
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}")
        net.backward(dlogits)
        sgd_step(params, velocity, lr_at(step, cfg), cfg.momentum, cfg.weight_decay)
        losses.append(loss)
        done = step + 1
        if done % cfg.eval_every == 0 or done == end:
            top1, by_kind = evaluate(net, val_ds) if val_ds is not None and len(val_ds) else (0.0, {})
            rec = MetricsRecord(done, float(np.mean(losses)), top1, by_kind,
                                (time.perf_counter() - t0) * 1000.0)
            records.append(rec)
            losses = []
            if log:
                log(rec)
            if out_dir is not None and top1 > best:
                save_network(net, os.path.join(out_dir, "best"), meta={"step": done, "val_top1": top1})
            best = max(best, top1)
    if out_dir is not None:
        save_checkpoint(net, velocity, end, cfg, os.path.join(out_dir, "last"))
    return TrainResult(records, best, end)


def save_checkpoint(net, velocity, step, cfg, directory):
    return save_network(net, directory, _velocity_state(net, velocity),
                        {"step": step, "train_config": asdict(cfg)})


def load_checkpoint(directory):
    """Returns ``(net, velocity, step, train_config)`` for resuming."""
    net, extra, meta = load_network(directory)
    velocity = [extra[f"velocity/{name}"].copy() for name, _ in net.named_parameters()]
    return net, velocity, meta["step"], TrainConfig.from_dict(meta["train_config"])
