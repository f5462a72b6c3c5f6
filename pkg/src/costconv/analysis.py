"""What the learned fusion coefficients say about spatial vs temporal features.

Per-layer mean coefficients over a validation set, a per-class temporal
importance ranking, and the ablation driver that trains every unit kind under
one protocol.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .baseline import count_cost
from .network import NetworkConfig, build_network
from .train import TrainConfig, evaluate, train

ROW_TOL = 1e-5


def collect_alphas(net, x, batch_size=64):
    """Eval-mode coefficients of every CoST layer: ``{name: (n, c, 3)}``.

    Constant (variant a or injected) coefficients are broadcast to every sample.
    """
    layers = net.cost_layers()
    if not layers:
        raise ValueError("network has no CoST layers")
    out = {name: [] for name, _, _ in layers}
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        net.forward(xb, train=False)
        for name, _, layer in layers:
            a = layer.last_alpha
            if a.ndim == 2:
                a = np.broadcast_to(a, (len(xb),) + a.shape)
            out[name].append(np.asarray(a, dtype=np.float64))
    return {k: np.concatenate(v) for k, v in out.items()}


def _check_rows(means, where):
    if abs(float(np.sum(means)) - 1.0) > ROW_TOL:
        raise AssertionError(f"{where}: mean coefficients sum to {np.sum(means)!r}, not 1")


@dataclass
class CoefficientProfile:
    """Mean ``(hw, tw, th)`` coefficients per CoST layer and averaged over layers."""
    per_layer: list               # (layer_name, depth_index, hw, tw, th)
    overall: np.ndarray
    n_samples: int
    is_constant: bool = False

    @property
    def temporal_share(self):
        return float(self.overall[1] + self.overall[2])

    def depth_correlation(self):
        """Pearson correlation of depth vs temporal share; reported, never asserted."""
        if len(self.per_layer) < 2:
            return float("nan")
        depth = np.array([r[1] for r in self.per_layer], float)
        share = np.array([r[3] + r[4] for r in self.per_layer])
        if np.ptp(share) == 0 or np.ptp(depth) == 0:
            return float("nan")
        return float(np.corrcoef(depth, share)[0, 1])

    def to_dict(self):
        return {
            "per_layer": [{"layer": n, "depth": d, "hw": hw, "tw": tw, "th": th}
                          for n, d, hw, tw, th in self.per_layer],
            "overall": {"hw": float(self.overall[0]), "tw": float(self.overall[1]), "th": float(self.overall[2])},
            "temporal_share": self.temporal_share,
            "depth_temporal_correlation": self.depth_correlation(),
            "n_samples": self.n_samples,
            "is_constant": self.is_constant,
        }

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "depth", "hw", "tw", "th", "temporal_share"])
        for n, d, hw, tw, th in self.per_layer:
            w.writerow([n, d, repr(hw), repr(tw), repr(th), repr(tw + th)])
        o = self.overall
        w.writerow(["overall", "", repr(float(o[0])), repr(float(o[1])), repr(float(o[2])),
                    repr(self.temporal_share)])
        return buf.getvalue()

    def plot_data(self):
        """``series,x,y`` rows: one series per view, x = depth index."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["series", "x", "y"])
        for col, view in zip((2, 3, 4), ("hw", "tw", "th")):
            for r in self.per_layer:
                w.writerow([view, r[1], repr(r[col])])
        return buf.getvalue()


def coefficient_profile(net, x, batch_size=64):
    """Profile of ``net`` on inputs ``x`` (an array or a dataset with ``.x``)."""
    x = getattr(x, "x", x)
    alphas = collect_alphas(net, x, batch_size)
    per_layer = []
    for name, depth, layer in net.cost_layers():
        means = alphas[name].mean(axis=(0, 1))
        _check_rows(means, name)
        per_layer.append((name, depth, float(means[0]), float(means[1]), float(means[2])))
    overall = np.mean([r[2:] for r in per_layer], axis=0)
    _check_rows(overall, "overall")
    constant = all(layer.variant == "a" or layer.injected_alpha is not None
                   for _, _, layer in net.cost_layers())
    return CoefficientProfile(per_layer, overall, len(x), constant)


@dataclass
class ClassTemporalImportance:
    rows: list                    # (class_id, class_kind, temporal_score), sorted descending

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "class_id", "class_kind", "temporal_score"])
        for i, (cid, kind, score) in enumerate(self.rows):
            w.writerow([i + 1, cid, kind, repr(score)])
        return buf.getvalue()

    def to_dict(self):
        return [{"class_id": c, "class_kind": k, "temporal_score": s} for c, k, s in self.rows]

    def plot_data(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["series", "x", "y"])
        for cid, kind, score in self.rows:
            w.writerow([kind, cid, repr(score)])
        return buf.getvalue()


def sample_temporal_scores(net, x, batch_size=64):
    """Per sample, ``mean(alpha_tw + alpha_th)`` over all CoST layers and channels."""
    alphas = collect_alphas(net, x, batch_size)
    per_layer = [a[..., 1:].sum(axis=-1).mean(axis=1) for a in alphas.values()]
    return np.mean(per_layer, axis=0)


def class_temporal_ranking(net, ds, batch_size=64):
    """Classes sorted by temporal score, descending; ties keep class-id order."""
    scores = sample_temporal_scores(net, ds.x, batch_size)
    rows = []
    for cid, kind in enumerate(ds.kinds):
        sel = ds.y == cid
        if not np.any(sel):
            raise ValueError(f"class {cid} has no samples")
        rows.append((cid, kind, float(scores[sel].mean())))
    # stable sort on the negated score keeps ties in class-id order
    order = sorted(range(len(rows)), key=lambda i: -rows[i][2])
    return ClassTemporalImportance([rows[i] for i in order])


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

VARIANTS = {
    "c2d": {"unit_kind": "c2d"},
    "c3d311": {"unit_kind": "c3d311"},
    "c3d333": {"unit_kind": "c3d333"},
    "cost-a": {"unit_kind": "cost-a"},
    "cost-b": {"unit_kind": "cost-b"},
    "cost-b-noshare": {"unit_kind": "cost-b", "share_weights": False},
}


@dataclass
class AblationRun:
    variant: str
    seed: int
    top1: float
    top1_by_kind: dict
    params: int
    multiply_adds_naive: int
    multiply_adds_optimized: int
    profile: CoefficientProfile = None


@dataclass
class AblationReport:
    runs: list = field(default_factory=list)

    def variants(self):
        seen = []
        for r in self.runs:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def kinds(self):
        return sorted({k for r in self.runs for k in r.top1_by_kind})

    def mean_top1(self, variant, kind=None):
        vals = [r.top1 if kind is None else r.top1_by_kind[kind] for r in self.runs if r.variant == variant]
        return float(np.mean(vals))

    def accuracy_rows(self):
        """One row per (variant, class kind), accuracies averaged over seeds."""
        rows = []
        for v in self.variants():
            runs = [r for r in self.runs if r.variant == v]
            for k in self.kinds():
                rows.append({"variant": v, "class_kind": k, "top1_mean": self.mean_top1(v, k),
                             "top1_per_seed": [r.top1_by_kind[k] for r in runs],
                             "params": runs[0].params,
                             "multiply_adds_naive": runs[0].multiply_adds_naive,
                             "multiply_adds_optimized": runs[0].multiply_adds_optimized})
        return rows

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "class_kind", "top1_mean", "top1_per_seed", "params",
                    "multiply_adds_naive", "multiply_adds_optimized"])
        for r in self.accuracy_rows():
            w.writerow([r["variant"], r["class_kind"], repr(r["top1_mean"]),
                        " ".join(repr(a) for a in r["top1_per_seed"]), r["params"],
                        r["multiply_adds_naive"], r["multiply_adds_optimized"]])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "accuracy": self.accuracy_rows(),
            "overall": {v: self.mean_top1(v) for v in self.variants()},
            "profiles": {f"{r.variant}/seed{r.seed}": r.profile.to_dict()
                         for r in self.runs if r.profile is not None},
        }, indent=1, sort_keys=True)


def run_variant(variant, train_ds, val_ds, base_cfg, train_cfg, seed, out_dir=None, log=None):
    """Train one ablation variant; returns ``(AblationRun, trained net)``."""
    cfg = NetworkConfig.from_dict({**base_cfg.to_dict(), **VARIANTS[variant], "seed": seed})
    net = build_network(cfg)
    tcfg = TrainConfig.from_dict({**train_cfg.__dict__, "seed": seed})
    train(net, train_ds, val_ds, tcfg, out_dir=out_dir, log=log)
    top1, by_kind = evaluate(net, val_ds)
    cost = count_cost(net, cfg.input_shape)
    profile = coefficient_profile(net, val_ds) if net.cost_layers() else None
    run = AblationRun(variant, seed, top1, by_kind, net.num_params(), cost.multiply_adds_naive,
                      cost.multiply_adds_optimized, profile)
    return run, net


def ablation_suite(train_ds, val_ds, base_cfg, train_cfg, variants=tuple(VARIANTS), seeds=(0,), log=None):
    """Train every variant under identical data, schedule and seeds."""
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants: {sorted(unknown)}")
    report = AblationReport()
    for v in variants:
        for s in seeds:
            run, _ = run_variant(v, train_ds, val_ds, base_cfg, train_cfg, s, log=log)
            report.runs.append(run)
    return report
