import math

import numpy as np
import pytest

from s3rnet.errors import DimensionError, UsageError
from s3rnet.hsi import (
    DegradationConfig,
    GeomTransform,
    HsiCube,
    SyntheticSceneSpec,
    add_awgn,
    apply_transform,
    augment,
    bicubic_upsample,
    build_spectral_response,
    gaussian_kernel,
    generate_synthetic_hsi,
    measure_snr_db,
    sample_transform,
    spatial_degrade,
    spectral_degrade,
    synthesize_components,
)
from s3rnet.metrics import sam_metric

from oracles import dense_spatial_matrix


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def test_synthetic_deterministic_per_seed():
    spec = SyntheticSceneSpec(num_endmembers=4, seed=11)
    a = generate_synthetic_hsi(spec, 16, 16, 8)
    b = generate_synthetic_hsi(spec, 16, 16, 8)
    np.testing.assert_array_equal(a.data, b.data)
    c = generate_synthetic_hsi(SyntheticSceneSpec(num_endmembers=4, seed=12), 16, 16, 8)
    assert not np.array_equal(a.data, c.data)


def test_synthetic_single_endmember_has_zero_sam_everywhere():
    cube = generate_synthetic_hsi(SyntheticSceneSpec(num_endmembers=1, seed=3), 12, 12, 6)
    # every pixel spectrum is proportional to the single signature
    flat = cube.data.reshape(-1, 6)
    ref = np.broadcast_to(flat[0], flat.shape)
    assert sam_metric(flat.reshape(12, 12, 6), ref.reshape(12, 12, 6)) < 1e-4
    # the brightness field still varies spatially
    assert float(flat.sum(axis=1).std()) > 1e-3


def test_synthetic_abundances_sum_to_one():
    spec = SyntheticSceneSpec(num_endmembers=4, seed=5)
    _, abund, _ = synthesize_components(spec, 64, 64, 32)
    np.testing.assert_allclose(abund.sum(axis=2), 1.0, atol=1e-6)
    cube = generate_synthetic_hsi(spec, 64, 64, 32)
    assert cube.data.min() >= 0.0 and cube.data.max() <= 1.0


# ---------------------------------------------------------------------------
# degradation model
# ---------------------------------------------------------------------------

def test_spatial_degrade_paper_scale_shape():
    y = HsiCube(np.random.default_rng(0).random((256, 256, 172), dtype=np.float32))
    cfg = DegradationConfig.for_scale(4, 172, 6)
    out = spatial_degrade(y, cfg)
    assert out.data.shape == (64, 64, 172)


def test_spatial_degrade_preserves_constants():
    y = HsiCube(np.full((16, 16, 3), 0.625, dtype=np.float32))
    out = spatial_degrade(y, DegradationConfig.for_scale(4, 3, 2))
    np.testing.assert_allclose(out.data, 0.625, atol=1e-6)


def test_spatial_degrade_divisibility_error():
    y = HsiCube(np.zeros((15, 16, 3), dtype=np.float32))
    with pytest.raises(DimensionError):
        spatial_degrade(y, DegradationConfig.for_scale(4, 3, 2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_spatial_degrade_matches_dense_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    s = 4
    cfg = DegradationConfig.for_scale(s, 1, 1)
    kernel = gaussian_kernel(cfg.blur_sigma, cfg.blur_kernel_size)
    bmat = dense_spatial_matrix(16, 16, kernel, s)

    impulse = np.zeros((16, 16, 1), dtype=np.float32)
    impulse[5, 9, 0] = 1.0
    out = spatial_degrade(HsiCube(impulse), cfg)
    np.testing.assert_allclose(out.data.ravel(), bmat @ impulse.ravel(), atol=1e-5)

    random_cube = rng.random((16, 16, 1)).astype(np.float32)
    out = spatial_degrade(HsiCube(random_cube), cfg)
    np.testing.assert_allclose(out.data.ravel(), bmat @ random_cube.ravel(), atol=1e-5)


def test_spectral_degrade_identity_and_constancy():
    rng = np.random.default_rng(1)
    y = HsiCube(rng.random((8, 8, 6), dtype=np.float32))
    cfg = DegradationConfig(blur_sigma=1.0, blur_kernel_size=3, decimation=1,
                            spectral_response=np.eye(6))
    np.testing.assert_array_equal(spectral_degrade(y, cfg).data, y.data)

    flat = HsiCube(np.full((4, 4, 6), 0.3, dtype=np.float32))
    cfg2 = DegradationConfig(blur_sigma=1.0, blur_kernel_size=3, decimation=1,
                             spectral_response=build_spectral_response(6, 2))
    np.testing.assert_allclose(spectral_degrade(flat, cfg2).data, 0.3, atol=1e-7)


def test_spectral_degrade_band_counts():
    y = HsiCube(np.random.default_rng(2).random((8, 8, 172), dtype=np.float32))
    for mm in (4, 6):
        cfg = DegradationConfig(blur_sigma=1.0, blur_kernel_size=3, decimation=1,
                                spectral_response=build_spectral_response(172, mm))
        assert spectral_degrade(y, cfg).data.shape == (8, 8, mm)
    with pytest.raises(DimensionError):
        cfg = DegradationConfig(blur_sigma=1.0, blur_kernel_size=3, decimation=1,
                                spectral_response=build_spectral_response(64, 4))
        spectral_degrade(y, cfg)


def test_build_spectral_response_partitions():
    d = build_spectral_response(4, 2)
    np.testing.assert_allclose(d, [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])

    d = build_spectral_response(172, 4)
    for i, (b0, b1) in enumerate([(0, 43), (43, 86), (86, 129), (129, 172)]):
        assert np.all(d[i, b0:b1] > 0)
        assert np.all(np.delete(d[i], np.arange(b0, b1)) == 0)

    for m, mm in [(7, 3), (172, 6), (5, 5)]:
        np.testing.assert_allclose(build_spectral_response(m, mm).sum(axis=1), 1.0, atol=1e-9)

    with pytest.raises(UsageError):
        build_spectral_response(4, 8)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def test_awgn_inf_sentinel_is_identity():
    x = HsiCube(np.random.default_rng(0).random((8, 8, 4), dtype=np.float32))
    out = add_awgn(x, math.inf, seed=0)
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("snr_db", [35.0, 15.0])
def test_awgn_measured_snr_within_half_db(snr_db):
    x = HsiCube(np.random.default_rng(3).random((64, 64, 6), dtype=np.float32))
    noisy = add_awgn(x, snr_db, seed=7)
    assert abs(measure_snr_db(x.data, noisy.data) - snr_db) < 0.5


def test_awgn_seed_behaviour():
    x = HsiCube(np.random.default_rng(4).random((64, 64, 6), dtype=np.float32))
    a = add_awgn(x, 20.0, seed=1)
    b = add_awgn(x, 20.0, seed=2)
    assert not np.array_equal(a.data, b.data)
    assert abs(measure_snr_db(x.data, a.data) - measure_snr_db(x.data, b.data)) < 0.5
    np.testing.assert_array_equal(a.data, add_awgn(x, 20.0, seed=1).data)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _toy_triple(seed=0, hr=16, s=4, m=6, mm=3):
    spec = SyntheticSceneSpec(num_endmembers=3, blob_scale=2.0, seed=seed)
    y = generate_synthetic_hsi(spec, hr, hr, m)
    cfg = DegradationConfig.for_scale(s, m, mm)
    return spatial_degrade(y, cfg), spectral_degrade(y, cfg), y, cfg


def test_augment_identity_draw_is_unchanged():
    xh, xm, y, _ = _toy_triple()
    ident = GeomTransform()
    for cube, sc in ((xh, 4), (xm, 1), (y, 1)):
        np.testing.assert_array_equal(apply_transform(cube, ident, scale=sc).data, cube.data)


def test_augment_two_quarter_turns_equal_half_turn():
    _, _, y, _ = _toy_triple()
    once = apply_transform(apply_transform(y, GeomTransform(rot90=1)), GeomTransform(rot90=1))
    twice = apply_transform(y, GeomTransform(rot90=2))
    np.testing.assert_array_equal(once.data, twice.data)


def test_augment_crop_offsets_scale_consistently():
    xh, xm, y, _ = _toy_triple()
    t = GeomTransform(crop=(8, 4, 8))
    yc = apply_transform(y, t, scale=1)
    xhc = apply_transform(xh, t, scale=4)
    np.testing.assert_array_equal(yc.data, y.data[8:16, 4:12])
    np.testing.assert_array_equal(xhc.data, xh.data[2:4, 1:3])  # offsets / 4


def test_augment_rejects_oversized_crop():
    xh, xm, y, _ = _toy_triple()
    rng = np.random.default_rng(0)
    with pytest.raises(UsageError):
        sample_transform(rng, y.height, y.width, 4, crop_size=32)
    with pytest.raises(UsageError):
        sample_transform(rng, y.height, y.width, 4, crop_size=10)  # not scale-aligned


def test_augment_joint_draw_keeps_triple_aligned():
    xh, xm, y, cfg = _toy_triple()
    rng = np.random.default_rng(5)
    for _ in range(8):
        axh, axm, ay = augment(xh, xm, y, rng, scale=4)
        # degrading the augmented truth must reproduce the augmented inputs
        np.testing.assert_allclose(spatial_degrade(ay, cfg).data, axh.data, atol=1e-5)
        np.testing.assert_allclose(spectral_degrade(ay, cfg).data, axm.data, atol=1e-5)


def test_augment_with_crop_keeps_spectral_alignment():
    xh, xm, y, cfg = _toy_triple()
    rng = np.random.default_rng(6)
    axh, axm, ay = augment(xh, xm, y, rng, scale=4, crop_size=8)
    assert ay.data.shape == (8, 8, 6)
    assert axh.data.shape == (2, 2, 6)
    assert axm.data.shape == (8, 8, 3)
    # spectral degradation is pointwise, so it commutes with any crop
    np.testing.assert_allclose(spectral_degrade(ay, cfg).data, axm.data, atol=1e-5)


# ---------------------------------------------------------------------------
# bicubic reference
# ---------------------------------------------------------------------------

def test_bicubic_preserves_constants_and_shape():
    cube = HsiCube(np.full((4, 6, 2), 0.42, dtype=np.float32))
    out = bicubic_upsample(cube, 4)
    assert out.data.shape == (16, 24, 2)
    np.testing.assert_allclose(out.data, 0.42, atol=1e-6)


def test_bicubic_beats_nearest_on_smooth_ramp():
    h = np.linspace(0, 1, 8, dtype=np.float32)
    cube = HsiCube(np.tile(h[:, None, None], (1, 8, 1)))
    out = bicubic_upsample(cube, 2)
    ramp = np.linspace(out.data[0, 0, 0], out.data[-1, 0, 0], 16)
    assert np.max(np.abs(out.data[:, 0, 0] - ramp)) < 0.05
