"""``costconv`` command-line entry point.

Subcommands: gen, train, gradcheck, flops, analyze, oracle. Each writes its
outputs plus a ``run_manifest.json`` into ``--out``. Exit codes: 0 success,
2 config error, 3 I/O error, 4 numerical divergence, 5 oracle/gradcheck failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np
import scipy

from . import __version__
from . import analysis as A
from . import data as D
from . import verify as V
from .baseline import count_cost, k_sweep
from .network import ConfigError, NetworkConfig, build_network, load_network
from .serialization import FormatError, file_sha256
from .train import DivergenceError, TrainConfig, metrics_csv, metrics_jsonl, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_CHECK = 0, 2, 3, 4, 5

NETWORK_KEYS = set(NetworkConfig.__dataclass_fields__)
TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


class CheckFailed(Exception):
    pass


def canonical_sha256(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass
class RunManifest:
    command: list
    config_sha256: str
    seed: int
    versions: dict = field(default_factory=lambda: {
        "costconv": __version__, "python": platform.python_version(),
        "numpy": np.__version__, "scipy": scipy.__version__})
    started: str = field(default_factory=_now)
    finished: str = ""
    outputs: list = field(default_factory=list)

    def finish(self, out_dir):
        """List every file under ``out_dir`` with its hash (the manifest itself excluded)."""
        files = []
        for root, _, names in os.walk(out_dir):
            for n in names:
                rel = os.path.relpath(os.path.join(root, n), out_dir)
                if rel != "run_manifest.json":
                    files.append(rel)
        self.outputs = [{"path": p, "sha256": file_sha256(os.path.join(out_dir, p))} for p in sorted(files)]
        self.finished = _now()
        with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
            json.dump(asdict(self), fh, indent=1)
        return self


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _write(out_dir, name, text):
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(text)


def _rows_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def split_config(flat):
    """Split a flat JSON config into network and train dicts; seed and dtype go to both."""
    unknown = set(flat) - NETWORK_KEYS - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    net = {k: v for k, v in flat.items() if k in NETWORK_KEYS}
    tr = {k: v for k, v in flat.items() if k in TRAIN_KEYS}
    return net, tr


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen(args):
    spec = D.DatasetSpec.from_dict(_read_json(args.spec)) if args.spec else D.DatasetSpec()
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(sys.argv[:1] + args.argv, canonical_sha256(spec.to_dict()), spec.train_seed)
    rows = D.write_dataset(spec, args.out)
    manifest.finish(args.out)
    print(f"wrote {len(rows)} clips for {spec.num_classes} classes to {args.out}")
    return EXIT_OK


def cmd_train(args):
    flat = _read_json(args.config)
    if args.unit is not None:
        flat["unit_kind"] = args.unit
    if args.no_share:
        flat["share_weights"] = False
    if args.seed is not None:
        flat["seed"] = args.seed
    net_d, tr_d = split_config(flat)
    spec, splits = D.read_dataset(args.data)
    net_d.setdefault("input_shape", [spec.t, spec.h, spec.w, spec.c])
    net_d.setdefault("num_classes", spec.num_classes)
    try:
        tcfg = TrainConfig.from_dict(tr_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    ncfg = NetworkConfig.from_dict(net_d)
    resolved = {"network": ncfg.to_dict(), "train": asdict(tcfg)}
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(sys.argv[:1] + args.argv, canonical_sha256(resolved), tcfg.seed)
    _write(args.out, "config.json", json.dumps(resolved, indent=1, sort_keys=True))

    records = []

    def log(rec):
        records.append(rec)
        by_kind = " ".join(f"{k}={v:.4f}" for k, v in sorted(rec.val_top1_by_class_kind.items()))
        print(f"step {rec.step} loss {rec.train_loss:.4f} val_top1 {rec.val_top1:.4f} {by_kind}", flush=True)

    try:
        train(build_network(ncfg), splits["train"], splits["val"], tcfg, out_dir=args.out, log=log)
    finally:
        # metrics so far are kept even when the run diverges
        _write(args.out, "metrics.csv", metrics_csv(records))
        _write(args.out, "metrics.jsonl", metrics_jsonl(records))
    manifest.finish(args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    reports = V.SUITES[args.scope](seed=args.seed, corrupt=args.corrupt)
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(sys.argv[:1] + args.argv,
                           canonical_sha256({"scope": args.scope, "corrupt": args.corrupt}), args.seed)
    lines = [r.line() for r in reports]
    print("\n".join(lines))
    _write(args.out, "gradcheck.txt", "\n".join(lines) + "\n")
    _write(args.out, "gradcheck.json", json.dumps(
        [{"name": r.name, "passed": r.passed, "max_rel_error": r.max_rel_error, "max_abs_error": r.max_abs_error,
          "probes": r.probed_coordinates} for r in reports], indent=1))
    manifest.finish(args.out)
    if not all(r.passed for r in reports):
        raise CheckFailed(f"{sum(not r.passed for r in reports)} gradient check(s) failed")
    return EXIT_OK


def cmd_flops(args):
    cfg = NetworkConfig.from_dict(_read_json(args.config))
    report = count_cost(build_network(cfg), cfg.input_shape)
    sweep = k_sweep()
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(sys.argv[:1] + args.argv, canonical_sha256(cfg.to_dict()), cfg.seed)
    _write(args.out, "op_cost.csv", report.to_csv())
    _write(args.out, "op_cost.json", report.to_json())
    _write(args.out, "k_sweep.csv", _rows_csv(sweep))
    _write(args.out, "k_sweep.json", json.dumps(sweep, indent=1))
    manifest.finish(args.out)
    print(f"params {report.params} multiply_adds_naive {report.multiply_adds_naive} "
          f"multiply_adds_optimized {report.multiply_adds_optimized}")
    print(_rows_csv(sweep), end="")
    return EXIT_OK


def cmd_analyze(args):
    if not os.path.isdir(args.checkpoint):
        raise FileNotFoundError(f"checkpoint directory {args.checkpoint} not found")
    net, _, meta = load_network(args.checkpoint)
    _, splits = D.read_dataset(args.data)
    ds = splits["val"]
    if not net.cost_layers():
        raise ConfigError("checkpoint has no CoST layers to analyze")
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(sys.argv[:1] + args.argv, canonical_sha256(meta), net.cfg.seed)
    profile = A.coefficient_profile(net, ds)
    ranking = A.class_temporal_ranking(net, ds)
    _write(args.out, "coefficient_profile.csv", profile.to_csv())
    _write(args.out, "coefficient_profile.json", json.dumps(profile.to_dict(), indent=1))
    _write(args.out, "coefficient_profile_plot.csv", profile.plot_data())
    _write(args.out, "class_ranking.csv", ranking.to_csv())
    _write(args.out, "class_ranking.json", json.dumps(ranking.to_dict(), indent=1))
    _write(args.out, "class_ranking_plot.csv", ranking.plot_data())
    manifest.finish(args.out)
    print(profile.to_csv(), end="")
    print(ranking.to_csv(), end="")
    return EXIT_OK


def cmd_oracle(args):
    if args.k < 1 or args.k % 2 == 0:
        raise ConfigError("--k must be a positive odd integer")
    kwargs = {"k": args.k} if args.which == "receptive-field" else {"k": args.k, "seed": args.seed}
    result = V.ORACLES[args.which](**kwargs)
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(sys.argv[:1] + args.argv, canonical_sha256({"which": args.which, **kwargs}), args.seed)
    _write(args.out, "oracle.json", json.dumps(result, indent=1))
    manifest.finish(args.out)
    print(("PASS " if result["passed"] else "FAIL ") + json.dumps(result))
    if not result["passed"]:
        raise CheckFailed(f"oracle {args.which} failed")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="costconv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic video dataset")
    g.add_argument("--spec", help="dataset spec JSON (default: built-in 8-class spec)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--config", help="flat JSON with network and training keys")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--unit", choices=["c2d", "c3d311", "c3d333", "cost-a", "cost-b"])
    t.add_argument("--no-share", action="store_true", help="separate kernels per view")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    c.add_argument("--scope", choices=sorted(V.SUITES), default="op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=os.path.join("costconv-runs", "gradcheck"))
    # negative-control hook: perturb the analytic gradient of one named check
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("flops", help="parameter and multiply-add report")
    f.add_argument("--config", help="network config JSON (default: built-in network)")
    f.add_argument("--out", default=os.path.join("costconv-runs", "flops"))
    f.set_defaults(func=cmd_flops)

    a = sub.add_parser("analyze", help="coefficient profile and class ranking of a checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    o = sub.add_parser("oracle", help="equivalence and counting oracles")
    o.add_argument("--which", choices=sorted(V.ORACLES), required=True)
    o.add_argument("--k", type=int, default=3)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default=os.path.join("costconv-runs", "oracle"))
    o.set_defaults(func=cmd_oracle)
    return p


def _thread_limit():
    raw = os.environ.get("COST_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"COST_THREADS must be a positive integer, got {raw!r}")
    return n


def run(argv):
    args = build_parser().parse_args(argv)
    args.argv = list(argv)
    limit = _thread_limit()
    if limit is None:
        return args.func(args)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=limit):
        return args.func(args)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except CheckFailed as exc:
        print(f"costconv: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except DivergenceError as exc:
        print(f"costconv: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as exc:
        print(f"costconv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, D.DataError, ValueError, KeyError, TypeError) as exc:
        print(f"costconv: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
