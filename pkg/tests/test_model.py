import json
from dataclasses import replace

import numpy as np
import pytest

import oracle
from conftest import unit_rows
from listrerank.embedder import apply_adapter
from listrerank.model import (
    AttentionVariant,
    CheckpointError,
    FeatureMode,
    ModelConfig,
    build_mask,
    init_params,
    list_encode,
    load_checkpoint,
    param_count,
    param_shapes,
    save_checkpoint,
    score,
    score_arrays,
    score_graph,
)
from listrerank.numerics import DimensionError, mean, parameter, relative_error

T, F = True, False
VARIANTS = list(AttentionVariant)


class TestMask:
    def test_list_3(self):
        np.testing.assert_array_equal(
            build_mask("list", 3), [[T, F, F, F], [T, T, T, T], [T, T, T, T], [T, T, T, T]]
        )

    def test_list_0(self):
        np.testing.assert_array_equal(build_mask("list", 0), [[T]])

    def test_passage_2(self):
        np.testing.assert_array_equal(build_mask("passage", 2), [[T, T, T], [T, T, F], [T, F, T]])

    @pytest.mark.parametrize("n", [0, 1, 5])
    def test_bidirectional_all_true(self, n):
        assert build_mask("bidirectional", n).all()

    @pytest.mark.parametrize("variant", ["list", "bidirectional", "passage"])
    @pytest.mark.parametrize("n", [0, 1, 4, 9])
    def test_matches_definition(self, variant, n):
        np.testing.assert_array_equal(build_mask(variant, n), oracle.visible(variant, n))


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(d=8, heads=3)

    def test_layers_positive(self):
        with pytest.raises(ValueError):
            ModelConfig(d=8, heads=2, layers=0)

    def test_dict_round_trip(self):
        cfg = ModelConfig(d=16, layers=3, heads=4, ffn_dim=8, attention_variant=AttentionVariant.PASSAGE, seed=9)
        assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestInit:
    def test_deterministic(self, tiny_config):
        a, b = init_params(tiny_config), init_params(tiny_config)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_seed_changes_something(self, tiny_config):
        a, b = init_params(tiny_config), init_params(replace(tiny_config, seed=tiny_config.seed + 1))
        assert any(a[k].tobytes() != b[k].tobytes() for k in a)

    def test_hand_count(self):
        d, layers, f, hidden = 8, 2, 16, 4
        per_layer = 4 * d * d + 2 * 2 * d + (d * f + f) + (f * d + d)
        pair_mlp = (2 * d * d + d) + (d + 1)
        fused = (2 * hidden + hidden) + (hidden + 1)
        adapter = d * d + d
        expected = adapter + 2 * d + layers * per_layer + 2 * pair_mlp + fused
        assert expected == 1531
        assert param_count(ModelConfig(d=8, layers=2, heads=2, ffn_dim=16)) == expected

    def test_init_scheme(self, tiny_config, tiny_params):
        for name, shape in param_shapes(tiny_config).items():
            v = tiny_params[name]
            assert v.shape == shape
            if name == "adapter.weight":
                np.testing.assert_array_equal(v, np.eye(8))
            elif name.endswith("gain"):
                assert (v == 1).all()
            elif len(shape) == 2 or name in ("e_q", "e_p"):
                assert np.abs(v).max() <= 1 / np.sqrt(shape[0])
            else:
                assert not v.any()


def _features(rng, n, d=8):
    return unit_rows(rng, d), unit_rows(rng, n, d)


def _oracle_cfg(cfg):
    return cfg.to_dict()


class TestOracle:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_encoder_matches_straight_line(self, variant):
        cfg = ModelConfig(d=8, layers=2, heads=2, ffn_dim=16, attention_variant=variant, seed=11)
        params = init_params(cfg)
        hq, hp = _features(np.random.default_rng(5), 3)
        z_q, z_p = list_encode(params, cfg, hq, hp)
        P = oracle.stack(params)
        z = oracle.encode(P, _oracle_cfg(cfg), hq[None], hp[None])[0]
        assert np.abs(z_q - z[0]).max() <= 1e-12
        assert np.abs(z_p - z[1:]).max() <= 1e-12

    @pytest.mark.parametrize("mode", list(FeatureMode))
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_scores_match_straight_line(self, variant, mode):
        cfg = ModelConfig(d=8, layers=2, heads=2, ffn_dim=16, attention_variant=variant, feature_mode=mode, seed=2)
        params = init_params(cfg)
        rng = np.random.default_rng(8)
        for name in params:
            if name.endswith(("b1", "b2", "bias")):
                params[name] = params[name] + 0.1 * rng.normal(size=params[name].shape)
        hq, hp = _features(rng, 3)
        P = oracle.stack(params)
        aq, ap = oracle.adapt(P, hq, hp)
        ours = score_arrays(params, cfg, aq[0], ap[0])
        ref = oracle.forward(P, _oracle_cfg(cfg), hq, hp)
        for a, b in zip(ours, ref):
            assert np.abs(a - b[0]).max() <= 1e-12


class TestInvariants:
    def test_query_preserved_under_list(self, tiny_config, tiny_params, rng):
        hq, one = _features(rng, 1)
        z_q1, _ = list_encode(tiny_params, tiny_config, hq, one)
        z_q50, _ = list_encode(tiny_params, tiny_config, hq, unit_rows(rng, 50, 8))
        assert np.abs(z_q1 - z_q50).max() <= 1e-12

    def test_bidirectional_differs_from_list(self, tiny_config, tiny_params, rng):
        hq, hp = _features(rng, 4)
        z_list, _ = list_encode(tiny_params, tiny_config, hq, hp)
        bi = replace(tiny_config, attention_variant=AttentionVariant.BIDIRECTIONAL)
        z_bi, _ = list_encode(tiny_params, bi, hq, hp)
        assert np.abs(z_list - z_bi).max() > 1e-6

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_permutation_equivariance(self, tiny_config, tiny_params, variant, rng):
        cfg = replace(tiny_config, attention_variant=variant)
        hq, hp = _features(rng, 7)
        perm = rng.permutation(7)
        z_q, z_p = list_encode(tiny_params, cfg, hq, hp)
        z_q2, z_p2 = list_encode(tiny_params, cfg, hq, hp[perm])
        assert np.abs(z_q - z_q2).max() <= 1e-12
        assert np.abs(z_p[perm] - z_p2).max() <= 1e-12
        s = score_arrays(tiny_params, cfg, hq, hp)[2]
        s2 = score_arrays(tiny_params, cfg, hq, hp[perm])[2]
        assert np.abs(s[perm] - s2).max() <= 1e-12

    def test_zero_fusion_gives_half(self, tiny_config, tiny_params, rng):
        params = dict(tiny_params)
        for name in ("mlp_fused.w1", "mlp_fused.b1", "mlp_fused.w2", "mlp_fused.b2"):
            params[name] = np.zeros_like(params[name])
        hq, hp = _features(rng, 5)
        assert all(b.s_final == 0.5 for b in score(params, tiny_config, hq, hp))

    def test_duplicates_identical(self, tiny_config, tiny_params, rng):
        hq, hp = _features(rng, 3)
        hp = np.vstack([hp, hp[1]])
        out = score(tiny_params, tiny_config, hq, hp)
        assert out[1] == out[3]

    def test_score_range_and_order(self, tiny_config, tiny_params, rng):
        hq, hp = _features(rng, 6)
        out = score(tiny_params, tiny_config, hq, hp)
        assert len(out) == 6 and all(0.0 < b.s_final < 1.0 for b in out)

    def test_listwise_mode_zeroes_origin(self, tiny_config, tiny_params, rng):
        hq, hp = _features(rng, 3)
        s_o, s_l, _ = score_arrays(tiny_params, replace(tiny_config, feature_mode=FeatureMode.LISTWISE), hq, hp)
        assert not s_o.any() and s_l.any()

    def test_original_mode_zeroes_list(self, tiny_config, tiny_params, rng):
        hq, hp = _features(rng, 3)
        s_o, s_l, _ = score_arrays(tiny_params, replace(tiny_config, feature_mode=FeatureMode.ORIGINAL), hq, hp)
        assert s_o.any() and not s_l.any()

    def test_empty_passages_rejected(self, tiny_config, tiny_params, rng):
        with pytest.raises(ValueError):
            list_encode(tiny_params, tiny_config, unit_rows(rng, 8), [])

    def test_dimension_mismatch(self, tiny_config, tiny_params, rng):
        with pytest.raises(DimensionError):
            list_encode(tiny_params, tiny_config, unit_rows(rng, 6), unit_rows(rng, 2, 6))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mean_score_gradient(seed):
    cfg = ModelConfig(d=8, layers=2, heads=2, ffn_dim=16, seed=seed)
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    params["adapter.weight"] = params["adapter.weight"] + 0.05 * rng.normal(size=(8, 8))
    rq, rp = _features(rng, 4)
    nodes = {k: parameter(v) for k, v in params.items()}
    hq = apply_adapter(rq, nodes["adapter.weight"], nodes["adapter.bias"])
    hp = apply_adapter(rp, nodes["adapter.weight"], nodes["adapter.bias"])
    mean(score_graph(nodes, cfg, hq, hp)[2]).backward()
    c = _oracle_cfg(cfg)
    numeric = oracle.central_diff(lambda P: oracle.forward(P, c, rq, rp)[2].mean(axis=1), params, 1e-3)
    for k in params:
        assert relative_error(nodes[k].grad, numeric[k]).max() <= 1e-4, k


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, tiny_config, tiny_params):
        path = tmp_path / "m.json"
        save_checkpoint(path, tiny_config, tiny_params, meta={"steps": 3})
        ckpt = load_checkpoint(path)
        assert ckpt.config == tiny_config and ckpt.meta == {"steps": 3}
        assert all(ckpt.params[k].tobytes() == tiny_params[k].tobytes() for k in tiny_params)
        assert not (tmp_path / "m.json.tmp").exists()

    def test_model_id_tracks_params(self, tmp_path, tiny_config, tiny_params):
        save_checkpoint(tmp_path / "a.json", tiny_config, tiny_params)
        changed = dict(tiny_params, e_q=tiny_params["e_q"] + 1e-9)
        save_checkpoint(tmp_path / "b.json", tiny_config, changed)
        a, b = load_checkpoint(tmp_path / "a.json"), load_checkpoint(tmp_path / "b.json")
        assert a.model_id != b.model_id
        assert a.model_id == load_checkpoint(tmp_path / "a.json").model_id

    def _doc(self, tmp_path, tiny_config, tiny_params):
        save_checkpoint(tmp_path / "m.json", tiny_config, tiny_params)
        return json.loads((tmp_path / "m.json").read_text())

    def _load(self, tmp_path, doc):
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        return load_checkpoint(tmp_path / "bad.json")

    def test_rejects_version(self, tmp_path, tiny_config, tiny_params):
        doc = self._doc(tmp_path, tiny_config, tiny_params)
        doc["format_version"] = 2
        with pytest.raises(CheckpointError, match="format_version"):
            self._load(tmp_path, doc)

    def test_rejects_shape(self, tmp_path, tiny_config, tiny_params):
        doc = self._doc(tmp_path, tiny_config, tiny_params)
        doc["tensors"]["e_q"]["shape"] = [4]
        with pytest.raises(CheckpointError, match="e_q"):
            self._load(tmp_path, doc)

    def test_rejects_missing_tensor(self, tmp_path, tiny_config, tiny_params):
        doc = self._doc(tmp_path, tiny_config, tiny_params)
        del doc["tensors"]["layer1.w_o"]
        with pytest.raises(CheckpointError, match="layer1.w_o"):
            self._load(tmp_path, doc)

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x.json").write_text("{oops")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.json")


def test_library_oracle_agrees_with_batched_differences():
    """finite_diff_grad on the graph loss matches the vectorized oracle probes."""
    from listrerank.numerics import finite_diff_grad
    from listrerank.trainer import StageConfig, batch_loss, batch_slopes

    cfg = ModelConfig(d=8, layers=2, heads=2, ffn_dim=16, seed=4)
    params = init_params(cfg)
    rng = np.random.default_rng(4)
    batch = [(unit_rows(rng, 8), unit_rows(rng, 4, 8), np.array([1, 0, 0, 1]))]
    stage = StageConfig(m=0.1)
    slopes = batch_slopes(params, cfg, batch, stage)
    names = ["layer0.w_q", "mlp_fused.w1", "adapter.bias"]
    ours = finite_diff_grad(
        lambda p: float(batch_loss(p, cfg, batch, stage, slopes=slopes)[0].value), params, h=1e-3, names=names, order=4
    )
    c = cfg.to_dict()
    objective = oracle.batch_objective(c, batch, 0.1, 10.0, oracle.frozen_slopes(params, c, batch, 0.1, 10.0))
    ref = oracle.central_diff(objective, params, 1e-3)
    for k in names:
        np.testing.assert_allclose(ours[k], ref[k], rtol=1e-6, atol=1e-9)
