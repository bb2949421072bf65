import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvt.errors import ConfigError, DimensionError, FormatError
from nvt.model import (
    VIT_B16,
    ViTConfig,
    forward,
    init_params,
    load_checkpoint,
    param_count,
    param_shapes,
    patchify,
    resize_pos_embed,
    save_checkpoint,
)
from nvt.noise import NoiseConfig
from nvt.tensor import Tensor

DESK = ViTConfig(image_size=32, patch_size=8, embed_dim=16, depth=2, num_heads=2, num_classes=4)


def brute_count(cfg):
    return sum(p.data.size for p in init_params(cfg, 0).values())


@pytest.fixture(scope="module")
def desk_params():
    return init_params(DESK, 0)


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(0).standard_normal((4, 3, 32, 32))


# config -------------------------------------------------------------------------


def test_embed_dim_must_divide_heads():
    with pytest.raises(ConfigError, match="model"):
        ViTConfig(32, 8, 15, 2, 2, 4)


def test_indivisible_patch():
    with pytest.raises(ConfigError):
        ViTConfig(30, 8, 16, 2, 2, 4)


def test_config_json_round_trip():
    assert ViTConfig.from_json(DESK.to_json()) == DESK


# patchify -----------------------------------------------------------------------


@pytest.mark.parametrize("size,patches", [(224, 196), (384, 576)])
def test_patch_counts(size, patches):
    cfg = ViTConfig(image_size=size, num_classes=1000, **VIT_B16)
    assert cfg.num_patches == patches and cfg.seq_len == patches + 1


def test_patchify_shape_224():
    out = patchify(Tensor(np.zeros((1, 3, 224, 224))), 16)
    assert out.shape == (1, 196, 768)


def test_single_patch_is_flattened_image():
    img = np.random.default_rng(1).standard_normal((2, 3, 32, 32))
    out = patchify(Tensor(img), 32).data
    np.testing.assert_array_equal(out, img.reshape(2, 1, -1))


def test_patch_order_row_major_channel_first():
    img = np.arange(3 * 4 * 4, dtype=float).reshape(1, 3, 4, 4)
    out = patchify(Tensor(img), 2).data
    # patch 1 is the top-right block
    np.testing.assert_array_equal(out[0, 1], img[0, :, 0:2, 2:4].ravel())
    np.testing.assert_array_equal(out[0, 2], img[0, :, 2:4, 0:2].ravel())


def test_patchify_indivisible():
    with pytest.raises(ConfigError):
        patchify(Tensor(np.zeros((1, 3, 30, 30))), 8)


# forward ------------------------------------------------------------------------


def test_output_shape(desk_params, batch):
    assert forward(desk_params, DESK, batch).shape == (4, 4)


def test_geometry_mismatch(desk_params):
    with pytest.raises(DimensionError):
        forward(desk_params, DESK, np.zeros((1, 3, 16, 16)))


def test_noise_layer_out_of_range(desk_params, batch):
    with pytest.raises(ConfigError):
        forward(desk_params, DESK, batch, NoiseConfig("identity", 2))


def test_identity_noise_is_bit_identical(desk_params, batch):
    base = forward(desk_params, DESK, batch).data
    for layer in range(DESK.depth):
        got = forward(desk_params, DESK, batch, NoiseConfig("identity", layer)).data
        np.testing.assert_array_equal(got, base)


def test_noise_changes_logits(desk_params, batch):
    base = forward(desk_params, DESK, batch).data
    noisy = forward(desk_params, DESK, batch, NoiseConfig("cyclic_shift_add", 1, 0.5)).data
    assert not np.allclose(base, noisy)


def test_permutation_equivariance_without_noise(desk_params, batch):
    perm = np.array([2, 0, 3, 1])
    base = forward(desk_params, DESK, batch).data
    np.testing.assert_allclose(forward(desk_params, DESK, batch[perm]).data, base[perm], atol=1e-12)


def test_permutation_equivariance_with_conjugated_q(desk_params, batch):
    perm = np.array([2, 0, 3, 1])
    pm = np.eye(4)[perm]
    q = np.eye(4) + 0.5 * np.roll(np.eye(4), 1, axis=1)
    base = forward(desk_params, DESK, batch, NoiseConfig("custom", 0, custom=q)).data
    conj = NoiseConfig("custom", 0, custom=pm @ q @ pm.T)
    np.testing.assert_allclose(forward(desk_params, DESK, batch[perm], conj).data, base[perm], atol=1e-12)


def test_train_equals_eval_without_dropout(desk_params, batch):
    a = forward(desk_params, DESK, batch, mode="train", rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, forward(desk_params, DESK, batch, mode="eval").data)


def test_dropout_is_seeded():
    cfg = ViTConfig(32, 8, 16, 2, 2, 4, drop_rate=0.2)
    params = init_params(cfg, 0)
    x = np.random.default_rng(3).standard_normal((2, 3, 32, 32))
    a = forward(params, cfg, x, mode="train", rng=np.random.default_rng(5)).data
    b = forward(params, cfg, x, mode="train", rng=np.random.default_rng(5)).data
    c = forward(params, cfg, x, mode="eval").data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_every_layer_sees_full_sequence(desk_params, batch):
    trace = []
    forward(desk_params, DESK, batch, trace=trace)
    assert trace == [(4, 17, 16)] * DESK.depth


# init ---------------------------------------------------------------------------


def test_init_deterministic():
    a, b = init_params(DESK, 7), init_params(DESK, 7)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_init_seeds_differ():
    a, b = init_params(DESK, 1), init_params(DESK, 2)
    assert not np.array_equal(a["head.weight"].data, b["head.weight"].data)


def test_init_layout():
    p = init_params(DESK, 0)
    assert np.all(p["cls_token"].data == 0)
    assert np.all(p["blocks.0.attn.qkv.bias"].data == 0)
    assert np.all(p["norm.weight"].data == 1)
    assert p["pos_embed"].data.std() > 0


@pytest.mark.parametrize("seed", range(10))
def test_init_truncation_bound(seed):
    p = init_params(DESK, seed)
    assert max(np.abs(t.data).max() for t in p.values() if not np.all(t.data == 1)) <= 2 * 0.02


# param_count --------------------------------------------------------------------


def test_vit_b16_count_near_86m():
    n = param_count(ViTConfig(image_size=224, num_classes=1000, **VIT_B16))
    assert n == 86_567_656
    assert abs(n - 86e6) / 86e6 < 0.01


def test_desk_count_matches_enumeration():
    assert param_count(DESK) == brute_count(DESK) == 10_036


@settings(max_examples=20, deadline=None)
@given(patch=st.sampled_from([4, 8, 16]), heads=st.integers(1, 4), hd=st.integers(1, 6),
       depth=st.integers(1, 3), classes=st.integers(2, 9), ratio=st.sampled_from([1.0, 2.0, 4.0]))
def test_count_matches_enumeration_property(patch, heads, hd, depth, classes, ratio):
    cfg = ViTConfig(32, patch, heads * hd, depth, heads, classes, mlp_ratio=ratio)
    assert param_count(cfg) == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_count_affine_in_depth():
    counts = [param_count(ViTConfig(32, 8, 16, d, 2, 4)) for d in (1, 2, 4)]
    block = counts[1] - counts[0]
    assert counts[2] - counts[1] == 2 * block


# resize_pos_embed ---------------------------------------------------------------


def test_resize_same_grid_identical():
    t = np.random.default_rng(0).standard_normal((1, 5, 3))
    np.testing.assert_array_equal(resize_pos_embed(t, 2, 2), t)


@pytest.mark.parametrize("new", [1, 3, 4, 7])
def test_resize_constant_stays_constant(new):
    t = np.full((1, 5, 4), 0.375)
    out = resize_pos_embed(t, 2, new)
    assert out.shape == (1, 1 + new * new, 4)
    np.testing.assert_allclose(out, 0.375, atol=1e-15)


def test_resize_linear_ramp_2_to_4():
    def ramp(g):
        r, c = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
        s = 1.0 / (g - 1)
        return np.stack([0.3 + 2.0 * r * s - 1.5 * c * s, r * s + c * s], axis=-1).reshape(1, g * g, 2)

    cls = np.array([[[9.0, -9.0]]])
    out = resize_pos_embed(np.concatenate([cls, ramp(2)], axis=1), 2, 4)
    np.testing.assert_array_equal(out[:, :1], cls)
    np.testing.assert_allclose(out[:, 1:], ramp(4), atol=1e-12, rtol=0)


def test_resize_wrong_row_count():
    with pytest.raises(DimensionError):
        resize_pos_embed(np.zeros((1, 6, 2)), 2, 3)


# checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, desk_params, batch):
    noise = NoiseConfig("cyclic_shift_add", 1, 0.5, selection_seed=4)
    path = tmp_path / "m.nvt"
    save_checkpoint(desk_params, DESK, noise, {"epoch": 3}, path)
    params, cfg, got_noise, meta = load_checkpoint(path)
    assert cfg == DESK and got_noise == noise and meta == {"epoch": 3}
    for k in desk_params:
        np.testing.assert_array_equal(params[k].data, desk_params[k].data)
    np.testing.assert_array_equal(forward(params, cfg, batch, got_noise).data,
                                  forward(desk_params, DESK, batch, noise).data)


def test_checkpoint_without_noise(tmp_path, desk_params):
    save_checkpoint(desk_params, DESK, None, None, tmp_path / "m.nvt")
    assert load_checkpoint(tmp_path / "m.nvt")[2] is None


def test_tampered_magic(tmp_path, desk_params):
    path = tmp_path / "m.nvt"
    save_checkpoint(desk_params, DESK, None, None, path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="offset 0"):
        load_checkpoint(path)


def test_truncated_checkpoint(tmp_path, desk_params):
    path = tmp_path / "m.nvt"
    save_checkpoint(desk_params, DESK, None, None, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(path)
