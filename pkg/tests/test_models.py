import numpy as np
import pytest

from avfusion import numcore as nc
from avfusion.checks import check_architecture
from avfusion.models import (ARCHITECTURES, BASELINES, PROPOSED, ArchSpec, build_model, count_by_block,
                             count_params, forward, list_architectures, param_shapes, toy_spec)
from avfusion.numcore import ShapeError, Tensor
from avfusion.trainer import bce_loss


def inputs(spec, b=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, spec.visual_dim)), rng.standard_normal((b, spec.audio_dim))


def test_catalog_closure():
    cat = list_architectures()
    assert len(cat) == 15
    assert len({e.name for e in cat}) == 15
    assert sum(e.family == "baseline" for e in cat) == 8
    for e in cat:
        assert e.description
        assert count_params(e.spec) > 0  # plan resolves at default dims without allocating


def test_fusion_none_iff_unimodal():
    for name in ARCHITECTURES:
        assert (ArchSpec(name).fusion == "none") == (name in ("fc_audio", "fc_visual"))


@pytest.mark.parametrize("name,expected", [
    ("fc_audio", 128 * 8000 + 8000 + 8000 * 8000 + 8000 + 8000 * 4716 + 4716),
    ("fc_visual", 1024 * 8000 + 8000 + 8000 * 8000 + 8000 + 8000 * 4716 + 4716),
    ("fc_early", 1152 * 8000 + 8000 + 8000 * 8000 + 8000 + 8000 * 4716 + 4716),
])
def test_unimodal_and_early_counts_closed_form(name, expected):
    assert count_params(ArchSpec(name)) == expected


def test_count_params_small_fc():
    spec = ArchSpec("fc_audio", visual_dim=1, audio_dim=2, hidden_dim=3, num_classes=1, branch_depth=1)
    # 2x3 + 3 hidden, then 3x1 + 1 classifier
    assert count_params(spec) == 9 + 4
    assert dict(count_by_block(spec)) == {"audio.fc0": 9, "classifier": 4}


def test_count_of_model_equals_count_of_spec():
    for name in ARCHITECTURES:
        spec = toy_spec(name)
        assert count_params(build_model(spec, 0)) == count_params(spec) == sum(n for _, n in count_by_block(spec))


def test_attend_fusion_is_under_a_quarter_of_fc_late():
    assert count_params(ArchSpec("attend_fusion")) < 0.25 * count_params(ArchSpec("fc_late"))


def test_parameter_names_unique_and_stable():
    for name in ARCHITECTURES:
        spec = toy_spec(name)
        a, b = build_model(spec, 3), build_model(spec, 3)
        assert list(a.params) == list(b.params) == list(param_shapes(spec))
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
        c = build_model(spec, 4)
        assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


@pytest.mark.parametrize("name", ARCHITECTURES)
def test_forward_shape_range_and_every_parameter_reached(name):
    spec = toy_spec(name)
    m = build_model(spec, 0)
    v, a = inputs(spec)
    p = forward(m, v, a)
    assert p.shape == (4, spec.num_classes)
    assert np.all((p.data > 0) & (p.data < 1))
    loss = bce_loss(p, Tensor((np.arange(12).reshape(4, 3) % 2).astype(float)))
    loss.backward()
    assert all(t.grad is not None for t in m.params.values())


@pytest.mark.parametrize("name,unused", [("fc_audio", "visual"), ("fc_visual", "audio")])
def test_unimodal_models_ignore_the_other_modality(name, unused):
    spec = toy_spec(name)
    m = build_model(spec, 1)
    v, a = inputs(spec)
    base = forward(m, v, a).data
    if unused == "visual":
        other = forward(m, v * 100 + 3, a).data
    else:
        other = forward(m, v, -a).data
    assert base.tobytes() == other.tobytes()


def test_unimodal_model_accepts_missing_modality():
    spec = toy_spec("fc_audio")
    m = build_model(spec, 0)
    _, a = inputs(spec)
    p = forward(m, np.zeros((4, 99)), a)  # wrong width is fine when unused
    assert p.shape == (4, 3)


def test_inference_is_deterministic_and_training_uses_dropout():
    spec = toy_spec("attend_fusion", hidden_dim=32)
    m = build_model(spec, 0)
    v, a = inputs(spec)
    assert forward(m, v, a).data.tobytes() == forward(m, v, a).data.tobytes()
    t1 = forward(m, v, a, training=True, seed=1).data
    t2 = forward(m, v, a, training=True, seed=1).data
    t3 = forward(m, v, a, training=True, seed=2).data
    assert t1.tobytes() == t2.tobytes() and t1.tobytes() != t3.tobytes()


@pytest.mark.parametrize("early,late", [("fc_early", "fc_late"), ("fcrn_early", "fcrn_late"),
                                        ("fcrgn_early", "fcrgn_late"),
                                        ("res_attention_early", "res_attention_late")])
def test_early_and_late_variants_share_output_shape(early, late):
    outs = []
    for name in (early, late):
        spec = toy_spec(name)
        outs.append(forward(build_model(spec, 0), *inputs(spec)).shape)
    assert outs[0] == outs[1]


def test_wrong_input_width_raises():
    spec = toy_spec("fc_late")
    m = build_model(spec, 0)
    with pytest.raises(ShapeError):
        forward(m, np.zeros((2, 5)), np.zeros((2, 4)))


def test_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec("no_such_model")
    with pytest.raises(ValueError):
        ArchSpec("fc_late", attention=False)
    with pytest.raises(ValueError):
        ArchSpec("fc_attention", modalities="audio")
    with pytest.raises(ValueError):
        ArchSpec("attend_fusion", visual_dim=7, audio_dim=4)  # 7 not divisible into 2 tokens
    with pytest.raises(ValueError):
        ArchSpec("fc_audio", hidden_dim=-1)
    s = ArchSpec("attend_fusion", attention=False, modalities="visual")
    assert s.label == "attend_fusion[no-attn,visual-only]"
    assert ArchSpec.from_dict(s.to_dict()) == s


def test_no_attention_ablation_keeps_widths():
    with_attn = param_shapes(toy_spec("attend_fusion"))
    without = param_shapes(toy_spec("attend_fusion", attention=False))
    assert not any(k.endswith("W_Q") for k in without)
    assert {k: v for k, v in with_attn.items() if "attn" not in k} == \
           {k: v for k, v in without.items() if "dense" not in k}


def test_mf_std_input_layout_is_supported():
    spec = ArchSpec("fc_late", visual_dim=2048, audio_dim=256)
    assert count_params(spec) > count_params(ArchSpec("fc_late"))


def test_attend_fusion_at_default_dims_single_record():
    spec = ArchSpec("attend_fusion")
    m = build_model(spec, 0)
    rng = np.random.default_rng(0)
    p = forward(m, rng.standard_normal((1, 1024)), rng.standard_normal((1, 128))).data
    assert p.shape == (1, 4716)
    assert np.all((p > 0) & (p < 1))


@pytest.mark.parametrize("name", ["fc_audio", "fcrgn_early", "attend_fusion", "self_cross_attention"])
def test_end_to_end_gradcheck_sample(name):
    r = check_architecture(name, seed=0)
    assert r.passed, str(r)


def test_families_are_disjoint():
    assert not set(BASELINES) & set(PROPOSED)
