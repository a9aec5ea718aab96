"""Network construction, forward contracts, ablations, attention export."""

import numpy as np
import pytest

from upet import ops
from upet.data import Volume
from upet.model import (AttentionUnavailableError, UPetConfig, build_model,
                        export_attention_maps)
from upet.tensor import Tensor


def tiny_config(**overrides):
    base = dict(levels=3, base_channels=2, input_shape=(8, 8, 8))
    base.update(overrides)
    return UPetConfig(**base)


def random_input(shape, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((1, 1) + tuple(shape)), dtype=dtype)


class TestConfig:
    def test_levels_below_three_rejected(self):
        with pytest.raises(ValueError, match="levels"):
            UPetConfig(levels=2, input_shape=(8, 8, 8))

    def test_indivisible_input_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            UPetConfig(levels=4, input_shape=(20, 32, 32))

    def test_default_deep_supervision_weights_halve_per_scale(self):
        cfg = UPetConfig(levels=4, input_shape=(32, 32, 32))
        assert cfg.deep_supervision_weights == (0.5, 0.25, 0.125)

    def test_num_classes_is_fixed(self):
        with pytest.raises(ValueError, match="three classes"):
            UPetConfig(num_classes=4)


def expected_parameter_count(cfg: UPetConfig) -> int:
    """Closed-form count over the declared blocks, independent of build."""
    ch = [cfg.base_channels * 2 ** l for l in range(cfg.levels)]
    total = 0
    for l in range(cfg.levels):
        cin = 1 if l == 0 else ch[l - 1]
        total += cin * ch[l] * 27 + ch[l] * ch[l] * 27
    for l in range(cfg.levels - 1):
        total += ch[l + 1] * ch[l] * 27                  # upsample conv
        total += 2 * ch[l] * ch[l] * 27 + ch[l] * ch[l] * 27   # decoder double conv
    if cfg.use_attention:
        gates = [(ch[l], ch[l + 1]) for l in range(cfg.levels - 1)]
        gates += [(ch[l], ch[-1]) for l in (cfg.levels - 2, cfg.levels - 3)]
        for c_x, c_g in gates:
            f_int = max(1, c_x // 2)
            total += f_int * c_x + f_int * c_g + f_int + f_int + 1
    heads = [ch[cfg.levels - 2], ch[cfg.levels - 3]]
    if cfg.include_bottleneck_head:
        heads.append(ch[-1])
    for c in heads:
        total += c * 3 + 3
    if cfg.use_pet_head:
        total += ch[0] * 1 + 1
        for l in range(1, cfg.levels):
            total += ch[l] * 1 + 1
    return total


class TestBuild:
    @pytest.mark.parametrize("kwargs", [
        {},
        {"use_attention": False},
        {"use_pet_head": False},
        {"levels": 4, "base_channels": 4, "input_shape": (16, 16, 16)},
        {"include_bottleneck_head": False},
    ])
    def test_parameter_count_matches_hand_count(self, kwargs):
        cfg = tiny_config(**kwargs)
        model = build_model(cfg, seed=1)
        assert model.num_parameters == expected_parameter_count(cfg)
        last_line = model.describe().splitlines()[-1]
        assert last_line == f"total parameters: {expected_parameter_count(cfg)}"

    def test_same_seed_is_bitwise_identical(self):
        a = build_model(tiny_config(), seed=7)
        b = build_model(tiny_config(), seed=7)
        for name in a.parameter_names():
            assert np.array_equal(a.get_parameter(name).data, b.get_parameter(name).data)

    def test_different_seed_differs(self):
        a = build_model(tiny_config(), seed=7)
        b = build_model(tiny_config(), seed=8)
        assert any(not np.array_equal(a.get_parameter(n).data, b.get_parameter(n).data)
                   for n in a.parameter_names())

    def test_biases_start_at_zero(self):
        model = build_model(tiny_config(), seed=3)
        for name in model.parameter_names():
            if name.endswith((".bias", ".b_g", ".b_psi")):
                assert np.all(model.get_parameter(name).data == 0.0), name

    def test_no_attention_has_no_gate_parameters(self):
        model = build_model(tiny_config(use_attention=False), seed=0)
        assert not any("gate" in n for n in model.parameter_names())
        assert "gate" not in model.describe()


class TestForward:
    def test_output_shapes_and_map_counts_levels4(self):
        cfg = UPetConfig(levels=4, base_channels=4, input_shape=(32, 32, 32))
        model = build_model(cfg, seed=0)
        out = model.forward(random_input((32, 32, 32)))
        assert out.pet_pred.shape == (1, 1, 32, 32, 32)
        skips = [k for k in out.attention_maps if k.startswith("skip-")]
        cls = [k for k in out.attention_maps if k.startswith("cls-")]
        assert len(skips) == 3 and len(cls) == 2
        assert len(out.per_scale_logits) == 3
        assert out.class_logits.shape == (1, 3)
        assert [a.shape for a in out.aux_pet_preds] == [
            (1, 1, 16, 16, 16), (1, 1, 8, 8, 8), (1, 1, 4, 4, 4)]

    def test_aggregation_is_mean_of_per_scale_logits(self):
        model = build_model(tiny_config(), seed=2)
        out = model.forward(random_input((8, 8, 8), seed=5))
        stacked = np.stack([t.data for t in out.per_scale_logits])
        recomputed = (stacked[0] + stacked[1] + stacked[2]) * np.float32(1 / 3)
        assert np.array_equal(out.class_logits.data, recomputed)

    def test_mean_aggregation_worked_example(self):
        a = Tensor(np.array([[1.0, 0.0, 0.0]], dtype=np.float32))
        b = Tensor(np.array([[0.0, 1.0, 0.0]], dtype=np.float32))
        c = Tensor(np.array([[1.0, 0.0, 0.0]], dtype=np.float32))
        agg = ops.scale(ops.add(ops.add(a, b), c), 1 / 3)
        assert np.allclose(agg.data, [[2 / 3, 1 / 3, 0.0]], atol=1e-7)
        assert int(agg.data.argmax()) == 0

    def test_all_zero_parameters_give_uniform_softmax(self):
        model = build_model(tiny_config(), seed=0)
        for name in model.parameter_names():
            model.get_parameter(name).data[...] = 0.0
        out = model.forward(random_input((8, 8, 8)))
        assert np.allclose(out.class_logits.data, 0.0, atol=0)
        probs = ops.softmax(out.class_logits).data
        assert np.allclose(probs, 1 / 3, atol=1e-7)

    def test_forward_is_bitwise_deterministic(self):
        model = build_model(tiny_config(), seed=4)
        x = random_input((8, 8, 8), seed=9)
        a = model.forward(x)
        b = model.forward(x)
        assert np.array_equal(a.pet_pred.data, b.pet_pred.data)
        assert np.array_equal(a.class_logits.data, b.class_logits.data)

    def test_wrong_spatial_shape_rejected(self):
        model = build_model(tiny_config(), seed=0)
        with pytest.raises(ValueError, match="spatial"):
            model.forward(random_input((16, 16, 16)))

    def test_wrong_dtype_rejected(self):
        model = build_model(tiny_config(), seed=0)
        with pytest.raises(TypeError, match="dtype"):
            model.forward(random_input((8, 8, 8), dtype=np.float64))

    def test_attention_maps_strictly_inside_unit_interval(self):
        model = build_model(tiny_config(), seed=6)
        out = model.forward(random_input((8, 8, 8), seed=2))
        for name, alpha in out.attention_maps.items():
            assert np.all(alpha.data > 0.0) and np.all(alpha.data < 1.0), name


class TestAblations:
    def test_no_pet_head_emits_no_pet_outputs(self):
        model = build_model(tiny_config(use_pet_head=False), seed=0)
        assert not any(n.startswith("pet_") for n in model.parameter_names())
        out = model.forward(random_input((8, 8, 8)))
        assert out.pet_pred is None
        assert out.aux_pet_preds == []

    def test_psi_zero_equals_plain_model_with_half_skips(self):
        cfg_att = tiny_config()
        cfg_plain = tiny_config(use_attention=False)
        gated = build_model(cfg_att, seed=11)
        plain = build_model(cfg_plain, seed=12)
        shared = {n: gated.get_parameter(n).data for n in gated.parameter_names()
                  if "gate" not in n}
        plain.load_arrays(shared)
        for name in gated.parameter_names():
            if name.endswith(".psi"):
                gated.get_parameter(name).data[...] = 0.0
        x = random_input((8, 8, 8), seed=13)
        out_g = gated.forward(x)
        out_p = plain.forward(x, skip_scale=0.5)
        assert np.allclose(out_g.pet_pred.data, out_p.pet_pred.data, atol=1e-5)
        assert np.allclose(out_g.class_logits.data, out_p.class_logits.data, atol=1e-5)

    def test_skip_scale_rejected_on_attention_model(self):
        model = build_model(tiny_config(), seed=0)
        with pytest.raises(ValueError, match="skip_scale"):
            model.forward(random_input((8, 8, 8)), skip_scale=0.5)

    def test_probability_aggregation_rows_sum_to_one(self):
        model = build_model(tiny_config(aggregate_probabilities=True), seed=1)
        out = model.forward(random_input((8, 8, 8)))
        assert np.allclose(out.class_logits.data.sum(axis=1), 1.0, atol=1e-6)
        probs = model.class_probabilities(out)
        assert np.allclose(probs, out.class_logits.data)


class TestAttentionExport:
    def test_exported_volumes_have_input_resolution(self):
        model = build_model(tiny_config(), seed=0)
        out = model.forward(random_input((8, 8, 8)))
        volumes = export_attention_maps(out)
        assert {v.name for v in volumes} == set(out.attention_maps)
        for v in volumes:
            assert isinstance(v, Volume)
            assert v.dims == (8, 8, 8)
            assert v.modality == "ATTN"
            assert np.all(v.elements > 0.0) and np.all(v.elements < 1.0)

    def test_psi_zero_exports_constant_half(self):
        model = build_model(tiny_config(), seed=0)
        for name in model.parameter_names():
            if name.endswith(".psi"):
                model.get_parameter(name).data[...] = 0.0
        out = model.forward(random_input((8, 8, 8)))
        for v in export_attention_maps(out):
            assert np.allclose(v.elements, 0.5, atol=1e-6)

    def test_selector_filters_by_name(self):
        model = build_model(tiny_config(), seed=0)
        out = model.forward(random_input((8, 8, 8)))
        volumes = export_attention_maps(out, ["skip-0"])
        assert [v.name for v in volumes] == ["skip-0"]
        with pytest.raises(KeyError, match="unknown gate"):
            export_attention_maps(out, ["skip-9"])

    def test_export_from_gate_free_model_rejected(self):
        model = build_model(tiny_config(use_attention=False), seed=0)
        out = model.forward(random_input((8, 8, 8)))
        with pytest.raises(AttentionUnavailableError, match="without attention"):
            export_attention_maps(out)


def test_checkpoint_roundtrip_preserves_forward():
    from upet.model import config_fingerprint
    from upet.training import AdamState, Checkpoint, load_checkpoint, save_checkpoint
    from upet.metrics import EvalReport
    from upet.model import config_to_dict

    model = build_model(tiny_config(), seed=21)
    x = random_input((8, 8, 8), seed=3)
    before = model.forward(x)
    report = EvalReport(accuracy=0.5, f1_macro=0.4, auc_cn=None, auc_ad=0.8,
                        auc_mci=0.6, mae=0.1, n_samples=4)
    ckpt = Checkpoint(params=model.export_arrays(),
                      adam=AdamState.for_parameters(model.parameters()),
                      epoch=3, metrics=report,
                      fingerprint=config_fingerprint(model.config),
                      model_config=config_to_dict(model.config), model_seed=21)
    import tempfile, pathlib
    with tempfile.TemporaryDirectory() as td:
        path = pathlib.Path(td) / "model.upet"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        rebuilt = loaded.rebuild_model()
    after = rebuilt.forward(x)
    assert np.array_equal(before.pet_pred.data, after.pet_pred.data)
    assert np.array_equal(before.class_logits.data, after.class_logits.data)
    assert loaded.metrics.auc_cn is None and loaded.metrics.auc_ad == 0.8
