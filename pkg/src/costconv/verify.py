"""Finite-difference gradient suites and reference oracles.

These back the ``gradcheck`` and ``oracle`` CLI subcommands. Each suite returns
a list of :class:`~costconv.gradcheck.GradCheckReport`; ``corrupt`` names one
check whose analytic gradient is deliberately perturbed, as a negative control.
"""
from __future__ import annotations

import numpy as np

from . import cost as C
from . import tensor as T
from .baseline import cost_to_masked_c3d_kernel, receptive_field_count
from .gradcheck import compare
from .network import NetworkConfig, build_network
from .train import cross_entropy_loss
from .units import ResidualUnit, UnitKind

OP_TOL = 1e-4
NETWORK_TOL = 1e-3


def _maybe_corrupt(name, grads, corrupt):
    if corrupt != name:
        return grads
    out = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    out[0].reshape(-1)[:] += 0.1 + 0.5 * np.abs(out[0].reshape(-1))
    return out


def _check(name, forward, backward, arrays, rng, n_probes, corrupt, tol=OP_TOL):
    out = forward()
    R = rng.standard_normal(np.shape(out))
    grads = _maybe_corrupt(name, backward(R), corrupt)
    return compare(name, lambda: float((forward() * R).sum()), arrays, grads, n_probes, rng, tol=tol)


def op_suite(seed=0, n_probes=100, corrupt=None):
    rng = np.random.default_rng(seed)
    reports = []
    x = rng.standard_normal((2, 3, 5, 4, 3))
    k5 = rng.standard_normal((4, 3, 3, 3, 3))
    reports.append(_check("conv3d", lambda: T.conv3d(x, k5, (1, 2, 1)),
                          lambda R: T.conv3d_backward(R, x, k5, (1, 2, 1)), [x, k5], rng, n_probes, corrupt))

    xp = rng.standard_normal((2, 6, 4, 4, 3))

    def pool_bwd(R):
        _, idx = T.max_pool(xp, (3, 3, 3), (2, 2, 2), "same", return_index=True)
        return [T.max_pool_backward(R, xp.shape, idx, (3, 3, 3), (2, 2, 2), "same")]
    reports.append(_check("max_pool", lambda: T.max_pool(xp, (3, 3, 3), (2, 2, 2), "same"), pool_bwd,
                          [xp], rng, n_probes, corrupt))

    def gmax_bwd(R):
        _, idx = T.global_max_pool_thw(xp, return_index=True)
        return [T.global_max_pool_thw_backward(R, xp.shape, idx)]
    reports.append(_check("global_max_pool", lambda: T.global_max_pool_thw(xp), gmax_bwd,
                          [xp], rng, n_probes, corrupt))
    reports.append(_check("global_avg_pool", lambda: T.global_avg_pool_thw(xp),
                          lambda R: [T.global_avg_pool_thw_backward(R, xp.shape)], [xp], rng, n_probes, corrupt))

    xl, w, b = rng.standard_normal((9, 7)), rng.standard_normal((7, 5)), rng.standard_normal(5)
    reports.append(_check("linear", lambda: T.linear(xl, w, b), lambda R: T.linear_backward(R, xl, w),
                          [xl, w, b], rng, n_probes, corrupt))
    m = rng.standard_normal((40, 3))
    reports.append(_check("softmax", lambda: T.softmax_rows(m),
                          lambda R: [T.softmax_rows_backward(R, T.softmax_rows(m))], [m], rng, n_probes, corrupt))

    xb = rng.standard_normal((3, 2, 3, 3, 4)) * 2 + 1
    g, be = rng.standard_normal(4), rng.standard_normal(4)

    def bn_fwd():
        return T.batch_norm(xb, g, be, np.zeros(4), np.ones(4), True)[0]

    def bn_bwd(R):
        return T.batch_norm_backward(R, T.batch_norm(xb, g, be, np.zeros(4), np.ones(4), True)[1])
    reports.append(_check("batch_norm", bn_fwd, bn_bwd, [xb, g, be], rng, n_probes, corrupt))

    xc = rng.standard_normal((2, 3, 4, 4, 3))
    kern = rng.standard_normal((3, 3, 3, 3))
    views, vcache = C.conv_three_views(xc, kern, (1, 2, 2), return_cache=True)
    Rv = [rng.standard_normal(v.shape) for v in views]
    dx, dks = C.conv_three_views_backward(Rv, vcache)
    grads = _maybe_corrupt("conv_three_views", [dx, sum(dks)], corrupt)
    reports.append(compare("conv_three_views",
                           lambda: float(sum((v * r).sum() for v, r in zip(C.conv_three_views(xc, kern, (1, 2, 2)), Rv))),
                           [xc, kern], grads, n_probes, rng))

    fv = [rng.standard_normal((2, 2, 3, 3, 3)) for _ in range(3)]
    alpha = rng.standard_normal((2, 3, 3))
    Rf = rng.standard_normal(fv[0].shape)
    dviews, dalpha = C.fuse_views_backward(Rf, fv, alpha)
    grads = _maybe_corrupt("fuse_views", list(dviews) + [dalpha], corrupt)
    reports.append(compare("fuse_views", lambda: float((C.fuse_views(*fv, alpha) * Rf).sum()),
                           fv + [alpha], grads, n_probes, rng))

    logits = rng.standard_normal((3, 3))
    y, _, cache = C.cost_a_forward(xc, kern, logits, return_cache=True)
    Ra = rng.standard_normal(y.shape)
    ga = C.cost_backward(cache, Ra)
    grads = _maybe_corrupt("cost_a", [ga["x"], ga["kernel"], ga["logits"]], corrupt)
    reports.append(compare("cost_a", lambda: float((C.cost_a_forward(xc, kern, logits)[0] * Ra).sum()),
                           [xc, kern, logits], grads, n_probes, rng))

    pred = C.CoeffPredictor(rng.standard_normal((3, 3)) * 0.5, rng.standard_normal((3, 3)) * 0.5,
                            rng.standard_normal(3) * 0.5)
    y, _, cache = C.cost_b_forward(xc, kern, pred, (1, 2, 2), return_cache=True)
    Rb = rng.standard_normal(y.shape)
    gb = C.cost_backward(cache, Rb)
    grads = _maybe_corrupt("cost_b", [gb["x"], gb["kernel"], gb["pred_conv1x1"], gb["pred_fc_w"],
                                      gb["pred_fc_b"]], corrupt)
    reports.append(compare("cost_b", lambda: float((C.cost_b_forward(xc, kern, pred, (1, 2, 2))[0] * Rb).sum()),
                           [xc, kern, pred.conv1x1, pred.fc_w, pred.fc_b], grads, n_probes, rng))
    return reports


UNIT_CASES = ("c2d", "c3d311", "c3d333", "cost-a", "cost-b", "cost-b-noshare")


def unit_suite(seed=0, n_probes=120, corrupt=None):
    rng = np.random.default_rng(seed)
    reports = []
    for case in UNIT_CASES:
        kind = case.replace("-noshare", "")
        unit = ResidualUnit(kind, 3, 2, 4, stride=2, share=not case.endswith("noshare"), rng=rng,
                            zero_init_residual=False)
        if unit.kind is UnitKind.COST_B:
            unit.mid.pred_fc_w.data[...] = rng.standard_normal((3, 3))
        if unit.kind is UnitKind.COST_A:
            unit.mid.coeff_logits.data[...] = rng.standard_normal(unit.mid.coeff_logits.data.shape)
        x = rng.standard_normal((2, 3, 4, 4, 3))
        R = rng.standard_normal((2, 3, 2, 2, 4))
        unit.zero_grad()
        unit.forward(x, train=True)
        dx = unit.backward(R)
        params = unit.parameters()
        grads = _maybe_corrupt(f"unit:{case}", [dx] + [p.grad for p in params], corrupt)
        reports.append(compare(f"unit:{case}", lambda: float((unit.forward(x, train=True) * R).sum()),
                               [x] + [p.data for p in params], grads, n_probes, rng))
    return reports


def micro_config(unit_kind="cost-b", seed=0):
    return NetworkConfig(input_shape=(4, 8, 8, 2), stem_channels=3, stem_pool=False,
                         blocks=[(2, 2, 4, 1), (2, 2, 6, 2)], unit_kind=unit_kind, num_classes=3,
                         seed=seed)


def network_suite(seed=0, n_probes=100, corrupt=None, kinds=("cost-b", "cost-a", "c3d311")):
    rng = np.random.default_rng(seed)
    reports = []
    for kind in kinds:
        net = build_network(micro_config(kind, seed))
        for _, p in net.named_tensors():
            if p.role == "bn_gamma":
                p.data[...] = rng.uniform(0.5, 1.5, p.data.shape)
            elif p.role in ("pred_fc_w", "coeff_logits"):
                p.data[...] = rng.standard_normal(p.data.shape)
        x = rng.random((3, 4, 8, 8, 2))
        labels = np.arange(3) % 3
        net.zero_grad()
        _, dlogits = cross_entropy_loss(net.forward(x, train=True), labels)
        net.backward(dlogits)
        params = net.parameters()
        grads = _maybe_corrupt(f"network:{kind}", [p.grad for p in params], corrupt)
        reports.append(compare(f"network:{kind}",
                               lambda: cross_entropy_loss(net.forward(x, train=True), labels)[0],
                               [p.data for p in params], grads, n_probes, rng, tol=NETWORK_TOL))
    return reports


SUITES = {"op": op_suite, "unit": unit_suite, "network": network_suite}


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

def loop_conv3d(x, kernel):
    """Direct-loop same-padded unit-stride cross-correlation (reference only)."""
    n, t, h, w, _ = x.shape
    c_out, _, kt, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (kt // 2,) * 2, (kh // 2,) * 2, (kw // 2,) * 2, (0, 0)))
    y = np.zeros((n, t, h, w, c_out))
    for i in range(t):
        for j in range(h):
            for k in range(w):
                patch = xp[:, i:i + kt, j:j + kh, k:k + kw, :]
                for o in range(c_out):
                    y[:, i, j, k, o] = np.einsum("ntuvc,ctuv->n", patch, kernel[o])
    return y


def oracle_masked_c3d(k=3, seed=0, n_inputs=50):
    """Max |conv3d(x, masked K) - CoST fused output| over random inputs and widths."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in (1, 2, 4):
        w = rng.standard_normal((c, c, k, k))
        alpha = rng.dirichlet(np.ones(3), c)
        K = cost_to_masked_c3d_kernel(w, alpha)
        for _ in range(n_inputs):
            x = rng.standard_normal((1, k + 2, k + 3, k + 2, c))
            fused = C.fuse_views(*C.conv_three_views(x, w), alpha)
            worst = max(worst, float(np.abs(T.conv3d(x, K) - fused).max()))
    return {"oracle": "masked-c3d", "k": k, "max_abs_diff": worst, "tolerance": 1e-10,
            "passed": worst <= 1e-10}


def oracle_receptive_field(k=3):
    cost = receptive_field_count("cost", k)
    c3d = receptive_field_count("c3d333", k)
    c2d = receptive_field_count("c2d", k)
    expected = (3 * k * k - 3 * k + 1, k ** 3, k * k)
    return {"oracle": "receptive-field", "k": k, "cost": cost, "c3d333": c3d, "c2d": c2d,
            "expected": list(expected), "passed": (cost, c3d, c2d) == expected}


def oracle_conv(k=3, seed=0, cases=20):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        c_in, c_out = rng.integers(1, 4, size=2)
        x = rng.standard_normal((int(rng.integers(1, 3)), 3, 4, 5, c_in))
        kern = rng.standard_normal((c_out, c_in, int(rng.choice([1, k])), k, k))
        worst = max(worst, float(np.abs(T.conv3d(x, kern) - loop_conv3d(x, kern)).max()))
    return {"oracle": "conv", "k": k, "max_abs_diff": worst, "tolerance": 1e-12, "passed": worst <= 1e-12}


ORACLES = {"masked-c3d": oracle_masked_c3d, "receptive-field": oracle_receptive_field, "conv": oracle_conv}
