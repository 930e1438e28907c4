import numpy as np
import pytest

from s3rnet import autodiff as ad
from s3rnet.autodiff import Tensor
from s3rnet.checkpoint import load_checkpoint, restore_model, save_checkpoint
from s3rnet.errors import CheckpointError, ConfigError, DimensionError
from s3rnet.model import (
    DFAB_RESIDUAL_SCALE,
    Conv2d,
    Dfab,
    ModelConfig,
    ResidualGroup,
    S3RNet,
    estimate_cost,
    flops_estimate,
)

from conftest import toy_model_config


def small_config(**kw):
    base = dict(bands=8, msi_bands=4, scale=4, base_channels=16, depths=(1, 1, 1, 1),
                growth=8, groups=4, reduction=2, group_size=1)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# identity / residual structure
# ---------------------------------------------------------------------------

def test_dfab_zero_init_is_bitwise_identity(rng):
    block = Dfab(8, 8, np.random.default_rng(0))
    block.zero_()
    x = Tensor(rng.random((2, 8, 6, 6), dtype=np.float32))
    out = block(x)
    np.testing.assert_array_equal(out.data, x.data)


def test_dfab_residual_scale_is_point_two():
    block = Dfab(8, 8, np.random.default_rng(0))
    block.zero_()
    block.fuse.bias.data[...] = 1.0  # fuse conv now emits exactly 1 everywhere
    x = Tensor(np.random.default_rng(1).random((1, 8, 4, 4), dtype=np.float32))
    out = block(x)
    np.testing.assert_allclose(out.data - x.data, DFAB_RESIDUAL_SCALE, rtol=1e-6)
    assert DFAB_RESIDUAL_SCALE == 0.2


def test_residual_group_zero_init_is_bitwise_identity(rng):
    group = ResidualGroup(8, 8, n_blocks=2, rng=np.random.default_rng(0))
    group.zero_()
    x = Tensor(rng.random((1, 8, 5, 5), dtype=np.float32))
    np.testing.assert_array_equal(group(x).data, x.data)


def test_grouped_residual_group_zero_init_is_bitwise_identity(rng):
    group = ResidualGroup(8, 8, n_blocks=1, rng=np.random.default_rng(0), groups=4)
    group.zero_()
    x = Tensor(rng.random((1, 8, 5, 5), dtype=np.float32))
    np.testing.assert_array_equal(group(x).data, x.data)


def test_full_branches_reduce_to_transitions_when_bodies_are_zero(rng):
    model = S3RNet(small_config(), seed=3)
    model.zero_residual_bodies()
    xh = rng.random((1, 8, 8, 8), dtype=np.float32)
    xm = rng.random((1, 4, 32, 32), dtype=np.float32)
    capture = {}
    with ad.no_grad():
        fq, fk, fv, fz = model.mbfn(Tensor(xh), Tensor(xm), capture)
    # group outputs equal the transition output, bitwise, along each branch
    s = model.config.scale
    trans_q = ad.leaky_relu(model.branch_q.transition(Tensor(xh)), 0.2).data
    np.testing.assert_array_equal(fq.data, trans_q)
    trans_k = ad.leaky_relu(model.branch_k.transition(Tensor(xm)), 0.2).data
    np.testing.assert_array_equal(fk.data, trans_k)


def test_grg_with_one_group_matches_rg_with_identical_weights(rng):
    rg = ResidualGroup(8, 8, n_blocks=2, rng=np.random.default_rng(7), groups=1)
    grg = ResidualGroup(8, 8, n_blocks=2, rng=np.random.default_rng(8), groups=1)
    for (_, a), (_, b) in zip(rg.named_params("x"), grg.named_params("x")):
        b.data[...] = a.data
    x = Tensor(rng.random((2, 8, 6, 6), dtype=np.float32))
    np.testing.assert_array_equal(rg(x).data, grg(x).data)


def test_grouped_conv_parameter_reduction():
    rng = np.random.default_rng(0)
    rg = ResidualGroup(16, 8, n_blocks=1, rng=rng, groups=1)
    grg = ResidualGroup(16, 8, n_blocks=1, rng=rng, groups=4)
    weights = lambda g: sum(t.size for n, t in g.named_params("x") if n.endswith("weight"))
    assert weights(grg) * 4 == weights(rg)


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

def test_mbfn_feature_shapes(rng):
    cfg = ModelConfig(bands=16, msi_bands=4, scale=4, base_channels=32,
                      depths=(1, 1, 1, 1), growth=16, groups=4, reduction=2, group_size=1)
    model = S3RNet(cfg, seed=0)
    xh = Tensor(rng.random((1, 16, 8, 8), dtype=np.float32))
    xm = Tensor(rng.random((1, 4, 32, 32), dtype=np.float32))
    with ad.no_grad():
        fq, fk, fv, fz = model.mbfn(xh, xm)
    assert fq.shape == (1, 32, 8, 8)
    assert fv.shape == (1, 32, 8, 8)
    assert fk.shape == (1, 32, 32, 32)
    assert fz.shape == (1, 32, 32, 32)


def test_branch_depths_follow_config():
    model = S3RNet(ModelConfig(bands=8, msi_bands=4, scale=2, base_channels=16,
                               depths=(4, 4, 6, 6), growth=8, groups=4,
                               reduction=2, group_size=1), seed=0)
    assert len(model.branch_q.groups) == 4
    assert len(model.branch_k.groups) == 4
    assert len(model.branch_v.groups) == 6
    assert len(model.branch_z.groups) == 6


@pytest.mark.parametrize("s", [2, 4])
@pytest.mark.parametrize("m", [8, 16])
@pytest.mark.parametrize("mm", [4, 6])
def test_output_shape_law(s, m, mm, rng):
    cfg = ModelConfig(bands=m, msi_bands=mm, scale=s, base_channels=8,
                      depths=(1, 1, 1, 1), growth=4, groups=2, reduction=2, group_size=1)
    model = S3RNet(cfg, seed=1)
    h = w = 4
    xh = rng.random((1, m, h, w), dtype=np.float32)
    xm = rng.random((1, mm, h * s, w * s), dtype=np.float32)
    with ad.no_grad():
        out = model(xh, xm)
    assert out.shape == (1, m, h * s, w * s)


def test_input_validation_errors(rng):
    model = S3RNet(small_config(), seed=0)
    xh = rng.random((1, 8, 8, 8), dtype=np.float32)
    with pytest.raises(DimensionError):
        with ad.no_grad():
            model(xh, rng.random((1, 4, 31, 32), dtype=np.float32))  # not scale x
    with pytest.raises(DimensionError):
        with ad.no_grad():
            model(xh, rng.random((1, 3, 32, 32), dtype=np.float32))  # wrong bands


def test_forward_is_deterministic(rng):
    model = S3RNet(small_config(), seed=5)
    xh = rng.random((1, 8, 8, 8), dtype=np.float32)
    xm = rng.random((1, 4, 32, 32), dtype=np.float32)
    with ad.no_grad():
        a = model(xh, xm).data
        b = model(xh, xm).data
    np.testing.assert_array_equal(a, b)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(bands=8, msi_bands=4, scale=4, base_channels=30, groups=4)
    with pytest.raises(ConfigError):
        ModelConfig(bands=8, msi_bands=4, scale=4, depths=(1, 1, 1))
    with pytest.raises(ConfigError):
        ModelConfig(bands=8, msi_bands=4, scale=4, base_channels=8, reduction=16)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bands": 8, "msi_bands": 4, "scale": 4, "bogus": 1})


# ---------------------------------------------------------------------------
# attention / gating behaviour
# ---------------------------------------------------------------------------

def test_ssawb_zero_adaptive_conv_gates_at_half(rng):
    cfg = small_config()
    model = S3RNet(cfg, seed=2)
    model.ssawb.adapt.zero_()
    f = Tensor(rng.random((1, 16, 8, 8), dtype=np.float32))
    capture = {}
    with ad.no_grad():
        model.ssawb(f, f, f, f, scale_factor=1, capture=capture)
    np.testing.assert_allclose(capture["ssawb.weights"], 0.5, atol=1e-7)
    # with W = 0.5 everywhere the gated sum is 0.5 * (Q + K + V + Z')
    q = model.ssawb.proj_q(f)
    k = model.ssawb.proj_k(f)
    v = model.ssawb.proj_v(f)
    z = model.ssawb.proj_z(f)
    with ad.no_grad():
        zp = ad.add(model.ssawb.attn_out(model.ssawb._attention(q, k, v, None)), z)
        expected = 0.5 * (q.data + k.data + v.data + zp.data)
    np.testing.assert_allclose(capture["ssawb.gated"], expected, atol=1e-6)


def test_attention_rows_sum_to_one(rng):
    model = S3RNet(small_config(), seed=4)
    xh = rng.random((1, 8, 8, 8), dtype=np.float32)
    xm = rng.random((1, 4, 32, 32), dtype=np.float32)
    capture = {}
    with ad.no_grad():
        model(xh, xm, capture=capture)
    attn = capture["ssawb.attn"]
    assert attn.shape == (1, 32 * 32, 32 * 32)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_gates_strictly_inside_unit_interval(rng):
    model = S3RNet(small_config(), seed=6)
    xh = rng.random((1, 8, 8, 8), dtype=np.float32)
    xm = rng.random((1, 4, 32, 32), dtype=np.float32)
    capture = {}
    with ad.no_grad():
        model(xh, xm, capture=capture)
    w = capture["ssawb.weights"]
    assert np.all(w > 0.0) and np.all(w < 1.0)


def test_attention_tiling_covers_grid(rng):
    cfg = small_config(attention_tile=4)
    model = S3RNet(cfg, seed=0)
    xh = rng.random((1, 8, 4, 4), dtype=np.float32)
    xm = rng.random((1, 4, 16, 16), dtype=np.float32)
    capture = {}
    with ad.no_grad():
        out = model(xh, xm, capture=capture)
    assert out.shape == (1, 8, 16, 16)
    tiles = [k for k in capture if k.startswith("ssawb.attn[")]
    assert len(tiles) == 16  # 16x16 grid split into 4x4 tiles
    for key in tiles:
        np.testing.assert_allclose(capture[key].sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# parameter and flop accounting
# ---------------------------------------------------------------------------

def test_pointwise_conv_param_count():
    conv = Conv2d(4, 8, 1, np.random.default_rng(0))
    assert sum(t.size for _, t in conv.named_params("c")) == 4 * 8 + 8


def test_param_count_matches_shape_arithmetic():
    cfg = small_config()
    model = S3RNet(cfg, seed=0)

    def conv_params(cin, cout, k, groups=1):
        return cout * (cin // groups) * k * k + cout

    def dfab_params(cf, g, groups):
        total = sum(conv_params(cf + j * g, g, 1, groups) for j in range(4))
        return total + conv_params(cf + 4 * g, cf, 1, groups)

    def group_params(cf, g, blocks, groups):
        return blocks * dfab_params(cf, g, groups) + conv_params(cf, cf, 3, groups)

    cf, g = cfg.base_channels, cfg.growth
    expected = 0
    for in_ch, depth, groups in (
        (cfg.bands, cfg.depths[0], cfg.groups),
        (cfg.msi_bands, cfg.depths[1], 1),
        (cfg.msi_bands + cfg.bands, cfg.depths[2], 1),
        (cfg.bands + cfg.msi_bands, cfg.depths[3], 1),
    ):
        expected += conv_params(in_ch, cf, 3)
        expected += depth * group_params(cf, g, cfg.group_size, groups)
    d = cfg.attn_channels
    expected += 4 * conv_params(cf, d, 1) + conv_params(d, d, 1)
    expected += conv_params(4 * d, 4 * d, 1) + conv_params(d, cf, 1)
    expected += conv_params(cf, cfg.bands, 3)
    assert model.param_count() == expected


def test_param_count_grows_superlinearly_with_width():
    small = S3RNet(small_config(base_channels=16), seed=0).param_count()
    double = S3RNet(small_config(base_channels=32), seed=0).param_count()
    quad = S3RNet(small_config(base_channels=64), seed=0).param_count()
    assert small < double < quad
    assert double > 2 * small
    assert quad > 2 * double


def test_flops_estimate_paper_scale_symbolic():
    cfg = ModelConfig(bands=172, msi_bands=6, scale=4)
    est = estimate_cost(cfg, (1, 172, 64, 64), (1, 6, 256, 256))
    assert est.output_shape == (1, 172, 256, 256)
    assert est.flops > 0
    assert flops_estimate(cfg, (1, 172, 64, 64), (1, 6, 256, 256)) == est.flops
    with pytest.raises(DimensionError):
        estimate_cost(cfg, (1, 172, 64, 64), (1, 6, 255, 256))


def test_flops_scale_with_width():
    lo = flops_estimate(small_config(base_channels=16), (1, 8, 8, 8), (1, 4, 32, 32))
    hi = flops_estimate(small_config(base_channels=32), (1, 8, 8, 8), (1, 4, 32, 32))
    assert hi > 2 * lo


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    model = S3RNet(small_config(), seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, meta={"note": "test"})
    restored, ck = restore_model(path)
    assert ck.meta["note"] == "test"
    assert restored.config == model.config
    for (na, ta), (nb, tb) in zip(model.named_params(), restored.named_params()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    xh = rng.random((1, 8, 8, 8), dtype=np.float32)
    xm = rng.random((1, 4, 32, 32), dtype=np.float32)
    with ad.no_grad():
        np.testing.assert_array_equal(model(xh, xm).data, restored(xh, xm).data)


def test_checkpoint_corruption_detected(tmp_path):
    model = S3RNet(small_config(), seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"\x10\x00\x00\x00" + b"notjson!" * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_toy_config_is_valid():
    model = S3RNet(toy_model_config(), seed=0)
    assert model.param_count() > 0
