"""Deterministic synthetic videos with appearance-only and motion-only classes.

Appearance classes show a static shape; motion classes all show the same
square and differ only in the direction it moves, so any single frame is
ambiguous between them. Objects wrap around the frame edges (torus), so
every frame contains the full object.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from . import serialization

SHAPES = ("circle", "square", "cross", "triangle")
DIRECTIONS = {"static": (0, 0), "left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
OBJECT_COLOR = np.array([0.9, 0.75, 0.6])
BACKGROUND = 0.15


class DataError(ValueError):
    pass


@dataclass
class ClassDef:
    kind: str          # appearance | motion | mixed
    shape: str
    trajectory: str

    def __post_init__(self):
        if self.kind not in ("appearance", "motion", "mixed"):
            raise DataError(f"unknown class kind {self.kind!r}")
        if self.shape not in SHAPES:
            raise DataError(f"unknown shape {self.shape!r}")
        if self.trajectory not in DIRECTIONS:
            raise DataError(f"unknown trajectory {self.trajectory!r}")


def default_classes():
    return ([ClassDef("appearance", s, "static") for s in SHAPES]
            + [ClassDef("motion", "square", d) for d in ("left", "right", "up", "down")])


@dataclass
class DatasetSpec:
    classes: list = field(default_factory=default_classes)
    clips_per_class: int = 200
    val_clips_per_class: int = 50
    t: int = 8
    h: int = 32
    w: int = 32
    c: int = 3
    noise: float = 0.05
    speed: int = 3
    object_size: int = 9
    train_seed: int = 1
    val_seed: int = 2

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassDef) else ClassDef(**c) for c in self.classes]
        if self.train_seed == self.val_seed:
            raise DataError("train and val seeds must differ")
        if min(self.t, self.h, self.w, self.c) < 1 or self.object_size > min(self.h, self.w):
            raise DataError("invalid clip geometry")

    @property
    def num_classes(self):
        return len(self.classes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)

    def subset(self, kinds):
        """Spec restricted to classes of the given kinds (labels are renumbered)."""
        d = self.to_dict()
        d["classes"] = [asdict(c) for c in self.classes if c.kind in kinds]
        return DatasetSpec.from_dict(d)


def shape_mask(shape, size):
    """Binary ``size x size`` stencil of a shape."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    if shape == "circle":
        return ((yy - c) ** 2 + (xx - c) ** 2) <= (size / 2.0) ** 2
    if shape == "square":
        m = np.zeros((size, size), bool)
        m[1:-1, 1:-1] = True
        return m
    if shape == "cross":
        arm = max(1, size // 3)
        lo = (size - arm) // 2
        m = np.zeros((size, size), bool)
        m[lo:lo + arm, :] = True
        m[:, lo:lo + arm] = True
        return m
    if shape == "triangle":
        return (yy >= 1) & (np.abs(xx - c) <= (yy / size) * c)
    raise DataError(f"unknown shape {shape!r}")


def render_clip(shape, trajectory, start, t, h, w, c=3, speed=3, size=9):
    """Noise-free clip ``(t, h, w, c)`` in [0, 1] with the object's top-left at ``start``."""
    canvas = np.zeros((h, w), bool)
    canvas[:size, :size] = shape_mask(shape, size)
    dy, dx = DIRECTIONS[trajectory]
    video = np.empty((t, h, w, c))
    color = np.resize(OBJECT_COLOR, c)
    for f in range(t):
        m = np.roll(canvas, (start[0] + dy * speed * f, start[1] + dx * speed * f), axis=(0, 1))
        video[f] = np.where(m[..., None], color, BACKGROUND)
    return video


def clip_seed(split_seed, class_id, index):
    words = np.random.SeedSequence([split_seed, class_id, index]).generate_state(2, np.uint32)
    return int(words[0]) << 32 | int(words[1])


@dataclass
class SyntheticClip:
    video: np.ndarray      # (1, t, h, w, c)
    label: int
    class_kind: str
    seed: int
    generator_params: dict


def generate_clip(spec, class_id, index, split="train"):
    if not 0 <= class_id < spec.num_classes:
        raise DataError(f"class id {class_id} out of range for {spec.num_classes} classes")
    split_seed = spec.train_seed if split == "train" else spec.val_seed
    seed = clip_seed(split_seed, class_id, index)
    rng = np.random.default_rng(seed)
    cd = spec.classes[class_id]
    start = (int(rng.integers(spec.h)), int(rng.integers(spec.w)))
    video = render_clip(cd.shape, cd.trajectory, start, spec.t, spec.h, spec.w, spec.c,
                        spec.speed, spec.object_size)
    if spec.noise > 0:
        video = np.clip(video + rng.normal(0.0, spec.noise, video.shape), 0.0, 1.0)
    params = {"shape": cd.shape, "trajectory": cd.trajectory, "speed": spec.speed,
              "noise": spec.noise, "start": start}
    return SyntheticClip(video[None].astype(np.float32), class_id, cd.kind, seed, params)


@dataclass
class Dataset:
    x: np.ndarray           # (n, t, h, w, c) float32
    y: np.ndarray           # (n,) int
    kinds: list             # class kind per class id
    seeds: np.ndarray

    def __len__(self):
        return len(self.y)

    def sample_kinds(self):
        return np.array([self.kinds[i] for i in self.y])

    def subset(self, mask):
        return Dataset(self.x[mask], self.y[mask], self.kinds, self.seeds[mask])


def make_split(spec, split="train"):
    per_class = spec.clips_per_class if split == "train" else spec.val_clips_per_class
    n = per_class * spec.num_classes
    x = np.empty((n, spec.t, spec.h, spec.w, spec.c), np.float32)
    y = np.empty(n, np.int64)
    seeds = np.empty(n, np.uint64)
    i = 0
    for cid in range(spec.num_classes):
        for j in range(per_class):
            clip = generate_clip(spec, cid, j, split)
            x[i], y[i], seeds[i] = clip.video[0], cid, clip.seed
            i += 1
    return Dataset(x, y, [c.kind for c in spec.classes], seeds)


MANIFEST_FIELDS = ["clip_id", "file", "label", "class_kind", "seed", "split", "sha256"]


def write_dataset(spec, path):
    """Write every clip as a COST tensor plus ``manifest.csv`` and ``spec.json``."""
    os.makedirs(os.path.join(path, "clips"), exist_ok=True)
    with open(os.path.join(path, "spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1, sort_keys=True)
    rows = []
    for split in ("train", "val"):
        per_class = spec.clips_per_class if split == "train" else spec.val_clips_per_class
        for cid in range(spec.num_classes):
            for j in range(per_class):
                clip = generate_clip(spec, cid, j, split)
                clip_id = f"{split}-{cid:03d}-{j:05d}"
                rel = os.path.join("clips", clip_id + ".cost")
                digest = serialization.save_tensor(os.path.join(path, rel), clip.video[0])
                rows.append({"clip_id": clip_id, "file": rel, "label": cid,
                             "class_kind": clip.class_kind, "seed": clip.seed,
                             "split": split, "sha256": digest})
    with open(os.path.join(path, "manifest.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def read_dataset(path):
    """Returns ``(spec, {"train": Dataset, "val": Dataset})`` verifying file hashes."""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory {path} not found")
    with open(os.path.join(path, "spec.json")) as fh:
        spec = DatasetSpec.from_dict(json.load(fh))
    with open(os.path.join(path, "manifest.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    kinds = [c.kind for c in spec.classes]
    shape = (spec.t, spec.h, spec.w, spec.c)
    out = {}
    for split in ("train", "val"):
        sel = [r for r in rows if r["split"] == split]
        x = np.empty((len(sel),) + shape, np.float32)
        for i, r in enumerate(sel):
            x[i] = serialization.load_tensor(os.path.join(path, r["file"]), r["sha256"])
        y = np.array([int(r["label"]) for r in sel], np.int64)
        seeds = np.array([int(r["seed"]) for r in sel], np.uint64)
        out[split] = Dataset(x, y, kinds, seeds)
    return spec, out


# --------------------------------------------------------------------------
# dataset validation oracles
# --------------------------------------------------------------------------

def frame_vote_nn_accuracy(train, test):
    """Order-free nearest-neighbour classifier on frame sets.

    Every frame of a test clip votes for the label of its nearest training
    frame (L2); the clip gets the majority label (ties -> smallest label).
    Frame order is never used, so the score measures how much class
    information is available without temporal ordering.
    """
    tf = train.x.reshape(len(train), train.x.shape[1], -1).astype(np.float64)
    bank = tf.reshape(-1, tf.shape[-1])
    bank_labels = np.repeat(train.y, tf.shape[1])
    bank_sq = (bank ** 2).sum(1)
    n_classes = len(train.kinds)
    correct = 0
    for clip, label in zip(test.x, test.y):
        frames = clip.reshape(clip.shape[0], -1).astype(np.float64)
        d = bank_sq[None, :] - 2.0 * frames @ bank.T
        votes = np.bincount(bank_labels[np.argmin(d, axis=1)], minlength=n_classes)
        correct += int(np.argmax(votes) == label)
    return correct / len(test)


def frame_histogram_ks(ds, class_a, class_b):
    """Largest two-sample KS statistic between per-frame pixel distributions."""
    a = ds.x[ds.y == class_a]
    b = ds.x[ds.y == class_b]
    worst = 0.0
    for f in range(ds.x.shape[1]):
        worst = max(worst, ks_2samp(a[:, f].ravel(), b[:, f].ravel()).statistic)
    return worst
