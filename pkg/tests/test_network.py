import numpy as np
import pytest

from gradcheck import assert_grad_close, numerical_grad
from voxelseg.features import FeatureConfig, FeatureLayout, feature_length
from voxelseg.layers import ConvLayer, FullLayer
from voxelseg.network import (
    ModelFormatError,
    NetworkConfig,
    build,
    forward,
    load_model,
    param_count,
    save_model,
)

MICRO_FEATURES = FeatureConfig(a=3, b=5, c=3, s=2, n_regions=3)
MICRO = NetworkConfig(
    features=MICRO_FEATURES, t=2, p=2,
    maps3d=(2,), maps_ortho=(2,), maps_down=(2,), hidden=(6,),
)

DESK_FEATURES = FeatureConfig(a=7, b=13, c=13, s=3, n_regions=8)
DESK = NetworkConfig(
    features=DESK_FEATURES, t=5, p=2,
    maps3d=(8,), maps_ortho=(12,), maps_down=(12,), hidden=(64,),
)


def test_input_width_with_and_without_centroids():
    f = MICRO_FEATURES
    full = build(MICRO, with_centroid_pathway=True, rng=0)
    sub = build(MICRO, with_centroid_pathway=False, rng=0)
    assert sub.input_width == f.a**3 + 3 * f.b**2 + 3 * f.c**2
    assert full.input_width == sub.input_width + f.n_regions


def test_shared_block_appears_once():
    model = build(MICRO, rng=0)
    ortho_keys = [k for k in model.params if k.startswith("ortho_")]
    assert ortho_keys == ["ortho_conv0_w", "ortho_conv0_b"]
    assert param_count(MICRO) == sum(v.size for v in model.params.values())


def test_param_counting_rules():
    # single fully-connected layer: n_out*(n_in+1)
    fl = FullLayer(np.zeros((3, 2)), np.zeros(3))
    assert fl.weights.size + fl.bias.size == 9
    # single 2D conv layer 1 -> 4 maps with t=5: 4*25 + 4
    cl = ConvLayer(np.zeros((4, 1, 5, 5)), np.zeros(4))
    assert cl.weights.size + cl.bias.size == 104


def test_desk_scale_param_count_closed_form():
    # Hand-derived from the counting rules, independent of the builder:
    # shapes 7 -conv5-> 3 -crop-> 2 -pool2-> 1 and 13 -conv5-> 9 -crop-> 8
    # -pool2-> 4 for the 2D pathways.
    conv3d = 8 * 1 * 5**3 + 8
    conv_ortho = 12 * 1 * 5**2 + 12      # shared across 3 orientations
    conv_down = 12 * 1 * 5**2 + 12
    merge = 8 * 1**3 + 3 * (12 * 4**2) + 3 * (12 * 4**2) + 8
    fc = 64 * merge + 64
    out = 8 * 64 + 8
    expected = conv3d + conv_ortho + conv_down + fc + out
    assert param_count(DESK, with_centroid_pathway=True) == expected
    model = build(DESK, rng=1)
    assert sum(v.size for v in model.params.values()) == expected


def test_probabilities_sum_to_one():
    model = build(MICRO, rng=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, model.input_width)).astype(np.float32)
    probs = model.forward_batch(x)
    assert probs.shape == (10, 3)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert (probs > 0).all()


def test_zero_output_layer_gives_uniform():
    model = build(MICRO, rng=5)
    model.params["out_w"][...] = 0
    model.params["out_b"][...] = 0
    rng = np.random.default_rng(6)
    fv = rng.normal(size=model.input_width).astype(np.float32)
    assert np.allclose(forward(model, fv), 1.0 / 3.0, atol=1e-7)


def test_feature_width_mismatch_rejected():
    model = build(MICRO, rng=0)
    with pytest.raises(ValueError, match="width"):
        model.forward_batch(np.zeros((2, model.input_width + 5), dtype=np.float32))


def test_ortho_permutation_equivariance():
    """Shared weights make the three orientation pathways one function, so
    permuting the patches permutes exactly their merge blocks."""
    model = build(MICRO, rng=7)
    lay = FeatureLayout(MICRO_FEATURES)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, feature_length(MICRO_FEATURES))).astype(np.float32)
    x_perm = x.copy()
    x_perm[:, lay.ortho[0]], x_perm[:, lay.ortho[1]], x_perm[:, lay.ortho[2]] = (
        x[:, lay.ortho[1]].copy(), x[:, lay.ortho[2]].copy(), x[:, lay.ortho[0]].copy(),
    )
    m0, widths = model.merged_representation(x)
    m1, _ = model.merged_representation(x_perm)
    # parts: patch3d, ortho0..2, down0..2, cdist
    bounds = np.cumsum([0] + widths)
    blocks0 = [m0[:, bounds[i] : bounds[i + 1]] for i in range(len(widths))]
    blocks1 = [m1[:, bounds[i] : bounds[i + 1]] for i in range(len(widths))]
    assert np.array_equal(blocks1[1], blocks0[2])
    assert np.array_equal(blocks1[2], blocks0[3])
    assert np.array_equal(blocks1[3], blocks0[1])
    for i in (0, 4, 5, 6, 7):
        assert np.array_equal(blocks1[i], blocks0[i])


def test_single_patch_model_selects_transverse():
    cfg = NetworkConfig(
        features=MICRO_FEATURES, t=2, p=2,
        maps_ortho=(2,), use_patch3d=False, n_ortho=1, use_downscaled=False,
        hidden=(4,),
    )
    model = build(cfg, with_centroid_pathway=False, rng=9)
    lay = FeatureLayout(MICRO_FEATURES)
    x = np.zeros((1, lay.length), dtype=np.float32)
    x[:, lay.ortho[2]] = 7.0  # transverse block
    selected = model.select_input(x)
    assert selected.shape == (1, MICRO_FEATURES.b**2)
    assert (selected == 7.0).all()


def test_stage1_and_full_differ_only_by_centroid_pathway():
    full = build(MICRO, with_centroid_pathway=True, rng=0)
    sub = build(MICRO, with_centroid_pathway=False, rng=0)
    assert len(full.pathways) == len(sub.pathways) + 1
    assert full.pathways[-1].kind == "direct"
    n = MICRO_FEATURES.n_regions
    assert full.params["fc0_w"].shape[1] == sub.params["fc0_w"].shape[1] + n
    assert set(full.params) == set(sub.params)


def test_depth_counts_parameterized_layers():
    model = build(MICRO, rng=0)
    assert model.depth == 1 + 1 + 1  # conv block, hidden, output


def test_inconsistent_shape_chain_rejected():
    with pytest.raises(ValueError, match="shrinks|small"):
        NetworkConfig(features=FeatureConfig(a=3, b=3, c=3, s=1, n_regions=2), t=5)


def test_save_load_roundtrip(tmp_path):
    model = build(MICRO, rng=11)
    path = tmp_path / "m.model"
    save_model(model, path)
    back = load_model(path)
    assert back.config == model.config
    assert back.with_centroid_pathway == model.with_centroid_pathway
    assert list(back.params) == list(model.params)
    for k in model.params:
        assert np.array_equal(back.params[k], model.params[k])
    rng = np.random.default_rng(12)
    x = rng.normal(size=(5, model.input_width)).astype(np.float32)
    assert np.array_equal(model.forward_batch(x), back.forward_batch(x))


def test_load_truncated_model(tmp_path):
    model = build(MICRO, rng=13)
    path = tmp_path / "m.model"
    save_model(model, path)
    raw = path.read_bytes()
    (tmp_path / "t.model").write_bytes(raw[: len(raw) - 17])
    with pytest.raises(ModelFormatError, match="truncated"):
        load_model(tmp_path / "t.model")


def test_load_bad_magic(tmp_path):
    (tmp_path / "bad.model").write_bytes(b"something 9\nend\n")
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(tmp_path / "bad.model")


def test_load_trailing_bytes(tmp_path):
    model = build(MICRO, rng=14)
    path = tmp_path / "m.model"
    save_model(model, path)
    (tmp_path / "t.model").write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ModelFormatError, match="trailing"):
        load_model(tmp_path / "t.model")


def test_full_network_shared_gradients_match_finite_differences():
    """Gradient of each shared block must equal the sum over orientations;
    checked end to end against central differences in double precision."""
    for seed in (0, 1):
        model = build(MICRO, with_centroid_pathway=True, rng=seed, dtype=np.float64)
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(3, model.input_width))
        up = rng.normal(size=(3, model.n_regions))

        logits, caches = model.forward_logits(x)
        tape = model.backward(caches, up)

        def loss():
            return float((up * model.forward_logits(x)[0]).sum())

        for name, grad in tape.items():
            assert_grad_close(grad, numerical_grad(loss, model.params[name]), tol=1e-3)
