"""Parameter and multiply-add accounting for every unit kind.

Run with ``python3 demos/02_complexity.py``.
"""
from costconv.baseline import count_cost, k_sweep
from costconv.network import NetworkConfig, build_network

print("per output element and input channel:")
for row in k_sweep():
    print(f"  k={row['k']}: C2D {row['c2d']}, CoST naive {row['cost_naive']}, "
          f"CoST optimized {row['cost_opt']}, C3D {row['c3d']}, saving {row['opt_saving']:.1%}")

print("\ndefault network, one sample:")
for kind in ("c2d", "c3d311", "c3d333", "cost-a", "cost-b"):
    cfg = NetworkConfig(unit_kind=kind)
    rep = count_cost(build_network(cfg), cfg.input_shape)
    print(f"  {kind:7s} params {rep.params:6d}  mult-adds naive {rep.multiply_adds_naive:8d}  "
          f"optimized {rep.multiply_adds_optimized:8d}")
