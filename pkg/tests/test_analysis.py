import json

import numpy as np
import pytest

from costconv import analysis as A
from costconv import cost as C
from costconv import data as D
from costconv.network import NetworkConfig, build_network
from costconv.train import TrainConfig


def small_cfg(**kw):
    base = dict(input_shape=(4, 8, 8, 3), stem_channels=4, stem_pool=False,
                blocks=[(2, 2, 8, 1), (2, 4, 8, 2)], num_classes=2, seed=2)
    base.update(kw)
    return NetworkConfig(**base)


def small_data(split="train", per_class=4):
    spec = D.DatasetSpec(classes=[D.default_classes()[0], D.default_classes()[4]],
                         clips_per_class=per_class, val_clips_per_class=per_class,
                         t=4, h=8, w=8, object_size=4, speed=1)
    return D.make_split(spec, split)


def perturb_predictors(net, rng):
    for _, _, layer in net.cost_layers():
        layer.pred_fc_w.data[...] = rng.standard_normal((3, 3))
        layer.pred_fc_b.data[...] = rng.standard_normal(3)


class TestProfile:
    def test_untrained_is_uniform(self):
        net = build_network(small_cfg())
        prof = A.coefficient_profile(net, small_data())
        # every alpha is exactly 1/3; only the averaging can round
        for r in prof.per_layer:
            np.testing.assert_allclose(r[2:], [1 / 3] * 3, rtol=0, atol=1e-15)
        np.testing.assert_allclose(prof.overall, [1 / 3] * 3, rtol=0, atol=1e-15)
        assert not prof.is_constant and prof.n_samples == 8

    def test_single_sample(self, rng):
        net = build_network(small_cfg())
        perturb_predictors(net, rng)
        x = small_data().x[:1]
        prof = A.coefficient_profile(net, x)
        net.forward(x)
        for (name, _, layer), row in zip(net.cost_layers(), prof.per_layer):
            np.testing.assert_allclose(row[2:], layer.last_alpha[0].mean(axis=0), atol=1e-15)

    def test_row_stochastic(self, rng):
        net = build_network(small_cfg(cost_every_n=1))
        perturb_predictors(net, rng)
        prof = A.coefficient_profile(net, small_data())
        for r in prof.per_layer:
            assert abs(sum(r[2:]) - 1) <= 1e-5
        assert len(prof.per_layer) == 4

    def test_cost_a_is_constant_and_data_free(self, rng):
        net = build_network(small_cfg(unit_kind="cost-a"))
        for _, _, layer in net.cost_layers():
            layer.coeff_logits.data[...] = rng.standard_normal(layer.coeff_logits.data.shape)
        ds = small_data(per_class=6)
        a = A.coefficient_profile(net, ds.x[::2])
        b = A.coefficient_profile(net, ds.x[1::2])
        assert a.is_constant
        assert a.per_layer == b.per_layer
        layer = net.cost_layers()[0][2]
        expect = np.exp(layer.coeff_logits.data)
        expect /= expect.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(a.per_layer[0][2:], expect.mean(axis=0), atol=1e-15)

    def test_no_cost_layers(self):
        with pytest.raises(ValueError):
            A.coefficient_profile(build_network(small_cfg(unit_kind="c2d")), small_data())

    def test_outputs(self, rng):
        net = build_network(small_cfg())
        perturb_predictors(net, rng)
        prof = A.coefficient_profile(net, small_data())
        lines = prof.to_csv().splitlines()
        assert lines[0] == "layer,depth,hw,tw,th,temporal_share" and lines[-1].startswith("overall")
        d = json.loads(json.dumps(prof.to_dict()))
        assert d["temporal_share"] == pytest.approx(prof.overall[1] + prof.overall[2])
        assert np.isfinite(d["depth_temporal_correlation"]) or len(prof.per_layer) < 2
        plot = prof.plot_data().splitlines()
        assert plot[0] == "series,x,y" and len(plot) == 1 + 3 * len(prof.per_layer)

    def test_depth_correlation(self):
        prof = A.CoefficientProfile([("a", 0, 0.6, 0.2, 0.2), ("b", 1, 0.5, 0.3, 0.2), ("c", 2, 0.2, 0.4, 0.4)],
                                    np.array([0.43, 0.3, 0.27]), 1)
        assert prof.depth_correlation() > 0.9
        single = A.CoefficientProfile([("a", 0, 0.6, 0.2, 0.2)], np.array([0.6, 0.2, 0.2]), 1)
        assert np.isnan(single.depth_correlation())


class TestRanking:
    def test_constant_predictor_ties_by_id(self):
        net = build_network(small_cfg())
        rank = A.class_temporal_ranking(net, small_data())
        assert [r[0] for r in rank.rows] == [0, 1]
        assert all(r[2] == pytest.approx(2 / 3) for r in rank.rows)

    def test_larger_score_first(self, monkeypatch):
        ds = small_data()
        scores = np.where(ds.y == 1, 0.9, 0.4)
        monkeypatch.setattr(A, "sample_temporal_scores", lambda net, x, batch_size=64: scores)
        rank = A.class_temporal_ranking(None, ds)
        assert [(r[0], r[1]) for r in rank.rows] == [(1, "motion"), (0, "appearance")]
        assert rank.rows[0][2] == pytest.approx(0.9)

    def test_scores_in_unit_interval(self, rng):
        net = build_network(small_cfg())
        perturb_predictors(net, rng)
        rank = A.class_temporal_ranking(net, small_data())
        assert all(0 < r[2] < 1 for r in rank.rows)
        assert rank.to_csv().splitlines()[0] == "rank,class_id,class_kind,temporal_score"
        assert len(rank.to_dict()) == 2 and rank.plot_data().startswith("series,x,y")

    def test_empty_class(self):
        ds = small_data()
        ds = ds.subset(ds.y == 0)
        with pytest.raises(ValueError):
            A.class_temporal_ranking(build_network(small_cfg()), ds)


class TestAblation:
    def test_report_shape(self):
        tr, va = small_data(), small_data("val")
        cfg = TrainConfig(lr=0.05, total_steps=2, batch_size=4, eval_every=10)
        rep = A.ablation_suite(tr, va, small_cfg(), cfg, seeds=(0, 1))
        assert rep.variants() == list(A.VARIANTS)
        assert len(rep.runs) == 12
        assert len(rep.accuracy_rows()) == 6 * 2
        assert len(rep.to_csv().splitlines()) == 1 + 12
        params = {r.variant: r.params for r in rep.runs}
        kernels = 2 * 2 * 9 + 4 * 4 * 9
        assert params["cost-b-noshare"] == params["cost-b"] + 2 * kernels
        profiles = json.loads(rep.to_json())["profiles"]
        assert set(k.split("/")[0] for k in profiles) == {"cost-a", "cost-b", "cost-b-noshare"}

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            A.ablation_suite(None, None, small_cfg(), TrainConfig(), variants=("p3d",))

    def test_injected_profile_constant(self):
        net = build_network(small_cfg())
        C.inject_coefficients(net, [0.2, 0.3, 0.5])
        prof = A.coefficient_profile(net, small_data())
        assert prof.is_constant
        np.testing.assert_allclose(prof.overall, [0.2, 0.3, 0.5])
