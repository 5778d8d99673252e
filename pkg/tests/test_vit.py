import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kadapt import tensor as T
from kadapt.harness.optim import Optimizer
from kadapt.vit import (
    PRESETS,
    AttentionVariant,
    ViTConfig,
    ViTModel,
    dwconv,
    load_model,
    param_paths,
    read_checkpoint,
    save_model,
)

TINY = ViTConfig(image_size=16, patch_size=4, d_model=32, num_heads=4, num_layers=2, num_classes=10)


def images(n, cfg=TINY, seed=0):
    return np.random.default_rng(seed).normal(size=(n, cfg.channels, cfg.image_size, cfg.image_size))


def hand_count(cfg):
    # independent closed form: embed + cls + pos + blocks + final norm + head
    d, h, g = cfg.d_model, cfg.mlp_hidden, cfg.grid
    embed = d * cfg.channels * cfg.patch_size**2 + d
    per_block = 4 * d + 4 * d * d + 4 * d + 2 * h * d + h + d
    return embed + d + (g * g + 1) * d + cfg.num_layers * per_block + 2 * d + cfg.num_classes * (d + 1)


def test_config_invariants():
    with pytest.raises(ValueError):
        ViTConfig(image_size=15, patch_size=4)
    with pytest.raises(ValueError):
        ViTConfig(d_model=30, num_heads=4)
    with pytest.raises(ValueError):
        ViTConfig(num_layers=0)


def test_logits_shape():
    model = ViTModel.build(TINY, seed=0)
    assert model(images(2)).shape == (2, 10)


def test_forward_rejects_wrong_image_shape():
    model = ViTModel.build(TINY, seed=0)
    with pytest.raises(T.ShapeError):
        model(np.zeros((2, 1, 8, 8)))


def test_param_paths():
    model = ViTModel.build(TINY, seed=0)
    paths = param_paths(model)
    assert ("block.0.attn.Wq", (32, 32), 1024) in paths
    assert sum(c for _, _, c in paths) == hand_count(TINY) == model.num_params()
    for i in range(TINY.num_layers):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            assert model.params[f"block.{i}.attn.{w}"].shape == (32, 32)


def test_vit_tiny_default_count():
    assert ViTModel.build(PRESETS["vit-tiny"]).num_params() == hand_count(PRESETS["vit-tiny"]) == 202954


def test_build_deterministic():
    a, b = ViTModel.build(TINY, seed=3), ViTModel.build(TINY, seed=3)
    assert [p for p, *_ in param_paths(a)] == [p for p, *_ in param_paths(b)]
    assert all(np.array_equal(a.params[p].data, b.params[p].data) for p in a.params)
    c = ViTModel.build(TINY, seed=4)
    assert not np.array_equal(a.params["block.0.attn.Wq"].data, c.params["block.0.attn.Wq"].data)


def test_singleton_sequence_attention_is_projected_v():
    cfg = ViTConfig(image_size=4, patch_size=4, d_model=8, num_heads=2, num_layers=1, class_token=False)
    model = ViTModel.build(cfg, seed=0)
    trace = {}
    model(images(3, cfg), trace=trace)
    assert np.all(trace["attn"][0] == 1.0)
    np.testing.assert_allclose(trace["ctx"][0], trace["v"][0], rtol=0, atol=0)


def test_rpb_zero_table_matches_plain():
    plain = ViTModel.build(TINY, seed=0)
    rpb = plain.with_variant(AttentionVariant("rpb"))
    x = images(4)
    np.testing.assert_allclose(rpb(x).data, plain(x).data, rtol=0, atol=1e-12)


def test_rpb_table_size():
    m = ViTModel.build(TINY, seed=0).with_variant(AttentionVariant("rpb"))
    assert m.params["block.0.attn.rpb.table"].shape == ((2 * 4 - 1) ** 2, 4)
    assert m.params["block.0.attn.rpb.cls"].shape == (4,)


@pytest.mark.parametrize("mode", ["plain", "lepe", "rpb"])
def test_attention_rows_sum_to_one(mode):
    model = ViTModel.build(TINY, seed=0).with_variant(AttentionVariant(mode))
    rng = np.random.default_rng(1)
    for p in model.params.values():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    trace = {}
    model(images(3), trace=trace)
    for attn in trace["attn"]:
        np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-9)


@pytest.mark.parametrize("mode", ["plain", "lepe", "rpb"])
def test_batch_permutation_equivariance(mode):
    model = ViTModel.build(TINY, seed=0).with_variant(AttentionVariant(mode))
    x = images(5)
    perm = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(model(x[perm]).data, model(x).data[perm], rtol=0, atol=1e-12)


# ------------------------------------------------------------------ dwconv


def conv_oracle(v, kernel, class_token=True):
    b, n, ch = v.shape
    off = int(class_token)
    side = int(round((n - off) ** 0.5))
    k = kernel.shape[1]
    pad = k // 2
    grid = v[:, off:, :].reshape(b, side, side, ch)
    out = v.copy()
    res = np.zeros_like(grid)
    for i in range(side):
        for j in range(side):
            for dy in range(k):
                for dx in range(k):
                    y, x = i + dy - pad, j + dx - pad
                    if 0 <= y < side and 0 <= x < side:
                        res[:, i, j, :] += grid[:, y, x, :] * kernel[:, dy, dx]
    out[:, off:, :] = res.reshape(b, side * side, ch)
    return out


def test_dwconv_delta_kernel_is_identity():
    v = np.random.default_rng(0).normal(size=(2, 17, 3))
    kernel = np.zeros((3, 3, 3))
    kernel[:, 1, 1] = 1.0
    np.testing.assert_array_equal(dwconv(T.Tensor(v), T.Tensor(kernel)).data, v)


def test_dwconv_ones_kernel_on_constant_grid():
    v = np.full((1, 26, 2), 0.5)
    v[:, 0, :] = 7.0
    out = dwconv(T.Tensor(v), T.Tensor(np.ones((2, 3, 3)))).data
    grid = out[0, 1:, 0].reshape(5, 5)
    np.testing.assert_allclose(grid[1:-1, 1:-1], 4.5)
    assert grid[0, 0] == pytest.approx(4 * 0.5)
    np.testing.assert_array_equal(out[0, 0], [7.0, 7.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([1, 3, 5]), st.booleans(), st.integers(0, 2**31))
def test_dwconv_matches_direct_oracle(side, k, cls, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(2, side * side + int(cls), 3))
    kern = rng.normal(size=(3, k, k))
    np.testing.assert_allclose(dwconv(T.Tensor(v), T.Tensor(kern), cls).data, conv_oracle(v, kern, cls), atol=1e-12)


def test_dwconv_kernel_gradient():
    rng = np.random.default_rng(2)
    v, kern = T.Tensor(rng.normal(size=(2, 10, 3))), T.Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(2, 10, 3)))
    f = lambda k: T.tsum(T.mul(dwconv(v, k), w))  # noqa: E731
    T.backward(f(kern))
    num = T.finite_diff_grad(f, kern).data
    assert np.abs(kern.grad - num).max() <= 1e-5 * max(1.0, np.abs(num).max())


def test_dwconv_non_square_grid():
    with pytest.raises(T.ShapeError):
        dwconv(T.Tensor(np.zeros((1, 6, 2))), T.Tensor(np.zeros((2, 3, 3))))


# ----------------------------------------------------------- registry live


def test_memorization_all_parameters_live():
    cfg = PRESETS["vit-tiny"]
    model = ViTModel.build(cfg, seed=0)
    x = images(8, cfg, seed=1)
    y = np.arange(8) % cfg.num_classes
    params = list(model.params.values())
    for p in params:
        p.requires_grad = True
    opt = Optimizer("adamw", params, lr=1e-3, wd=0.0)
    loss = None
    for step in range(500):
        opt.zero_grad()
        loss = T.cross_entropy(model(x), y)
        if loss.item() < 0.01:
            break
        T.backward(loss)
        opt.step()
    assert loss.item() < 0.01


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = ViTModel.build(TINY, seed=5).with_variant(AttentionVariant("lepe"))
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    back = load_model(path)
    assert back.config == model.config and back.variant == model.variant
    assert list(back.params) == list(model.params)
    assert all(np.array_equal(back.params[p].data, model.params[p].data) for p in model.params)
    manifest, _ = read_checkpoint(path)
    assert manifest["tensors"][0] == {"path": "patch_embed.W", "offset": 0, "shape": [32, 16]}


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(path, ViTModel.build(TINY, seed=0))
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_model(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        load_model(tmp_path / "magic.ckpt")


def test_checkpoint_shape_mismatch(tmp_path):
    import json
    import struct

    path = tmp_path / "m.ckpt"
    save_model(path, ViTModel.build(TINY, seed=0))
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n])
    manifest["config"]["d_model"] = 16
    manifest["config"]["num_heads"] = 2
    blob = json.dumps(manifest).encode()
    (tmp_path / "bad.ckpt").write_bytes(raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + n :])
    with pytest.raises(T.ShapeError):
        load_model(tmp_path / "bad.ckpt")
