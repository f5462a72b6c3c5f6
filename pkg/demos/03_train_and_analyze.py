"""Train a small CoST(b) net on synthetic clips and read its coefficients.

Trains on a reduced dataset for under a minute, then prints the per-layer
mean coefficients and the per-class temporal ranking.
Run with ``python3 demos/03_train_and_analyze.py``.
"""
from costconv import analysis as A
from costconv.data import DatasetSpec, make_split
from costconv.network import NetworkConfig, build_network
from costconv.train import TrainConfig, train

spec = DatasetSpec(clips_per_class=60, val_clips_per_class=20)
train_ds, val_ds = make_split(spec, "train"), make_split(spec, "val")

net = build_network(NetworkConfig(unit_kind="cost-b", dtype="float32"))
cfg = TrainConfig(lr=0.1, total_steps=300, eval_every=100, dtype="float32")
train(net, train_ds, val_ds, cfg,
      log=lambda r: print(f"step {r.step}: loss {r.train_loss:.3f}, val top1 {r.val_top1:.3f}",
                          r.val_top1_by_class_kind))

profile = A.coefficient_profile(net, val_ds)
print(profile.to_csv())
print(A.class_temporal_ranking(net, val_ds).to_csv())
