import csv
import json
import math
import os

import numpy as np
import pytest

from costconv import cost as C
from costconv.baseline import count_cost
from costconv.gradcheck import compare
from costconv.network import (ConfigError, NetworkConfig, build_network, c2d_twin, load_config,
                              load_network, save_network)
from costconv.serialization import load_tensor
from costconv.train import cross_entropy_loss
from costconv.units import UnitKind

DATA = os.path.join(os.path.dirname(__file__), "data")


def tiny_config(**kw):
    base = dict(input_shape=(4, 8, 8, 2), stem_channels=3, stem_pool=False,
                blocks=[(2, 2, 4, 1), (2, 2, 6, 2)], num_classes=3, seed=3)
    base.update(kw)
    return NetworkConfig(**base)


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = NetworkConfig(unit_kind="c3d311", cost_every_n=3)
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
        path = tmp_path / "net.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert load_config(path) == cfg

    @pytest.mark.parametrize("bad", [
        {"unit_kind": "lstm"}, {"cost_every_n": 0}, {"blocks": []}, {"blocks": [(2, 8, 32)]},
        {"kernel_size": 4}, {"dtype": "float16"}, {"num_classes": 0}, {"input_shape": (8, 32, 32)},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            NetworkConfig(**bad).validate()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            NetworkConfig.from_dict({"depth": 50})

    def test_placement(self):
        cfg = NetworkConfig()
        kinds = [k for block in cfg.placement() for k in block]
        assert kinds == [UnitKind.C2D, UnitKind.COST_B] * 3
        every = NetworkConfig(cost_every_n=1).placement()
        assert all(k is UnitKind.COST_B for block in every for k in block)
        for count in range(1, 7):
            for n in (1, 2, 3):
                cfg = NetworkConfig(blocks=[(count, 2, 4, 1)], cost_every_n=n, cost_offset=n - 1)
                assert sum(k.is_cost for k in cfg.placement()[0]) == count // n
                cfg = NetworkConfig(blocks=[(count, 2, 4, 1)], cost_every_n=n, cost_offset=0)
                assert sum(k.is_cost for k in cfg.placement()[0]) == math.ceil(count / n)


class TestForward:
    def test_c2d_shapes(self, rng):
        net = build_network(NetworkConfig(unit_kind="c2d"))
        assert net.cost_layers() == []
        assert net.forward(rng.random((2, 8, 32, 32, 3))).shape == (2, 8)

    def test_zero_input_gives_bias(self):
        net = build_network(NetworkConfig())
        net.fc.bias.data[...] = np.arange(8) * 0.5
        np.testing.assert_array_equal(net.forward(np.zeros((1, 8, 32, 32, 3))), [np.arange(8) * 0.5])

    def test_identical_samples(self, rng):
        net = build_network(tiny_config())
        x = np.repeat(rng.random((1, 4, 8, 8, 2)), 2, axis=0)
        y = net.forward(x)
        assert np.array_equal(y[0], y[1])

    def test_shape_mismatch(self, rng):
        net = build_network(tiny_config())
        with pytest.raises(ValueError):
            net.forward(rng.random((1, 4, 8, 8, 3)))

    def test_golden_logits(self):
        net = build_network(NetworkConfig(seed=7))
        x = np.random.default_rng(11).random((2, 8, 32, 32, 3))
        golden = load_tensor(os.path.join(DATA, "golden_logits_seed7.cost"))
        # frozen in one BLAS build; other builds may differ in the last bits
        np.testing.assert_allclose(net.forward(x), golden, rtol=1e-12, atol=1e-12)

    def test_deterministic_init(self):
        a, b = build_network(NetworkConfig(seed=5)), build_network(NetworkConfig(seed=5))
        assert all(np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(a.named_tensors(), b.named_tensors()))

    def test_train_updates_running_stats(self, rng):
        net = build_network(tiny_config())
        before = net.stem_bn.running_mean.data.copy()
        net.forward(rng.random((2, 4, 8, 8, 2)), train=True)
        assert not np.array_equal(before, net.stem_bn.running_mean.data)

    def test_float32(self, rng):
        net = build_network(tiny_config(dtype="float32"))
        assert net.forward(rng.random((1, 4, 8, 8, 2))).dtype == np.float32


class TestAudit:
    def test_matches_hand_audit(self):
        with open(os.path.join(DATA, "default_network_audit.csv")) as fh:
            audit = {r["layer"]: r for r in csv.DictReader(fh)}
        rep = count_cost(build_network(NetworkConfig()), (8, 32, 32, 3))
        got = {r.layer: r for r in rep.rows}
        assert set(got) == set(audit)
        for name, r in audit.items():
            g = got[name]
            assert (g.params, g.ma_naive, g.ma_opt) == (int(r["params"]), int(r["ma_naive"]), int(r["ma_opt"])), name
        assert rep.params == build_network(NetworkConfig()).num_params() == 58260

    def test_noshare_param_delta(self):
        shared = build_network(NetworkConfig()).num_params()
        unshared = build_network(NetworkConfig(share_weights=False)).num_params()
        per_kernel = 8 * 8 * 9 + 16 * 16 * 9 + 32 * 32 * 9
        assert unshared == shared + 2 * per_kernel


class TestDegeneration:
    @pytest.mark.parametrize("kind", ["cost-a", "cost-b"])
    def test_matches_c2d_twin(self, kind, rng):
        net = build_network(tiny_config(unit_kind=kind, cost_every_n=1))
        for _, p in net.named_tensors():
            if p.role == "bn_gamma":
                p.data[...] = rng.uniform(0.5, 1.5, p.data.shape)
        C.inject_coefficients(net, [1, 0, 0])
        twin = c2d_twin(net)
        x = rng.random((2, 4, 8, 8, 2))
        assert np.abs(net.forward(x) - twin.forward(x)).max() <= 1e-10

    def test_twin_requires_shared(self):
        net = build_network(tiny_config(share_weights=False))
        with pytest.raises(KeyError):
            c2d_twin(net)


class TestPersistence:
    def test_roundtrip_bit_identical(self, tmp_path, rng):
        net = build_network(tiny_config())
        net.forward(rng.random((3, 4, 8, 8, 2)), train=True)
        save_network(net, tmp_path)
        back, extra, meta = load_network(tmp_path)
        assert extra == {} and meta["network_config"] == net.cfg.to_dict()
        x = rng.random((2, 4, 8, 8, 2))
        assert np.array_equal(net.forward(x), back.forward(x))
        roles = set(net.roles().values())
        assert {"shared_kernel", "pred_conv1x1", "bn_running_var", "conv_weight"} <= roles

    def test_load_state_errors(self):
        net = build_network(tiny_config())
        with pytest.raises(KeyError):
            net.load_state({})
        state = {k: v.copy() for k, v in net.state().items()}
        state["fc.bias"] = np.zeros(5)
        with pytest.raises(ValueError):
            net.load_state(state)


class TestBackward:
    def test_zero_upstream(self, rng):
        net = build_network(tiny_config())
        net.zero_grad()
        net.forward(rng.random((2, 4, 8, 8, 2)), train=True)
        net.backward(np.zeros((2, 3)))
        assert all(np.all(p.grad == 0) for p in net.parameters())

    @pytest.mark.parametrize("kind", ["cost-b", "cost-a", "c3d311"])
    def test_network_gradcheck(self, kind, rng):
        net = build_network(tiny_config(unit_kind=kind))
        for _, p in net.named_tensors():
            if p.role == "bn_gamma":
                p.data[...] = rng.uniform(0.5, 1.5, p.data.shape)
            if p.role == "pred_fc_w":
                p.data[...] = rng.standard_normal(p.data.shape)
        x = rng.random((3, 4, 8, 8, 2))
        labels = np.array([0, 1, 2])
        net.zero_grad()
        _, dlogits = cross_entropy_loss(net.forward(x, train=True), labels)
        net.backward(dlogits)
        params = net.parameters()
        rep = compare(f"network {kind}", lambda: cross_entropy_loss(net.forward(x, train=True), labels)[0],
                      [p.data for p in params], [p.grad for p in params], 60, rng, tol=1e-3)
        assert rep.passed, rep.line()
