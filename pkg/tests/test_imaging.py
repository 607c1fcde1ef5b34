from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from fcsr.imaging import (AUG_FLIPS, AUG_ROTATIONS, AUG_SCALES, _contributions, augment, bicubic_resample, cubic,
                          degrade, extract_patches, list_images, luminance, modcrop, output_size, prepare_dataset,
                          read_png, rgb_to_ycbcr, scale_tag, to_uint8, write_png, ycbcr_to_rgb)


def test_keys_kernel_partition_of_unity():
    phases = np.linspace(0, 1, 1000, endpoint=False)
    taps = np.arange(-2, 3)
    sums = cubic(phases[:, None] - taps[None, :]).sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("scale,antialias", [(3, False), (Fraction(1, 3), True), (Fraction(2, 5), True),
                                             (Fraction(5, 2), False)])
def test_resampling_weights_are_normalised(scale, antialias):
    w, idx = _contributions(17, output_size(17, scale), scale, antialias)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert idx.min() >= 0 and idx.max() < 17


@pytest.mark.parametrize("scale", [2, 3, 4, Fraction(1, 2), Fraction(1, 3), Fraction(5, 2)])
def test_constant_reproduced(scale):
    out = bicubic_resample(np.full((24, 30), 100.0), scale)
    assert out.shape == (output_size(24, scale), output_size(30, scale))
    np.testing.assert_allclose(out, 100.0, rtol=0, atol=1e-12)


def test_ramp_reproduced_in_interior():
    # half-pixel-centre convention: output j samples input position (j + 0.5) / 2 - 0.5
    ramp = np.tile(np.arange(40, dtype=np.float64), (6, 1))
    out = bicubic_resample(ramp, 2, antialias=False)
    j = np.arange(80)
    inner = slice(6, 74)
    assert out.shape == (12, 80)
    np.testing.assert_allclose(out[:, inner], np.tile((j[inner] + 0.5) / 2 - 0.5, (12, 1)), rtol=0, atol=1e-9)


@pytest.mark.parametrize("scale", [Fraction(1, 3), Fraction(1, 2), 2, 3])
def test_matches_pillow_bicubic_in_interior(camera, scale):
    # Pillow's bicubic filter is the same a = -0.5 kernel, widened when shrinking;
    # dims divisible by every scale so both resizers use the same ratio
    img = camera[100:220, 60:198]
    out = bicubic_resample(img, scale)
    ref = np.asarray(Image.fromarray(img.astype(np.float32), mode="F").resize(
        (out.shape[1], out.shape[0]), Image.Resampling.BICUBIC), dtype=np.float64)
    m = 8
    np.testing.assert_allclose(out[m:-m, m:-m], ref[m:-m, m:-m], rtol=0, atol=2e-3)


def test_resample_rejects_empty_output():
    with pytest.raises(ValueError):
        bicubic_resample(np.ones((0, 4)), 2)
    with pytest.raises(ValueError):
        bicubic_resample(np.ones((4, 4)), 0)


def test_studio_swing_extremes():
    y, cb, cr = rgb_to_ycbcr(np.array([[[255, 255, 255], [0, 0, 0]]], dtype=np.uint8))
    assert y[0, 0] == pytest.approx(235.0, abs=1e-9)
    assert (y[0, 1], cb[0, 1], cr[0, 1]) == pytest.approx((16.0, 128.0, 128.0))


def test_ycbcr_round_trip(rng):
    rgb = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    back = to_uint8(ycbcr_to_rgb(*rgb_to_ycbcr(rgb))).astype(int)
    assert np.max(np.abs(back - rgb)) <= 1


def test_ycbcr_round_trip_through_8bit_planes(rng):
    # quantising Y/Cb/Cr moves each by <= 0.5; the inverse matrix's largest
    # absolute row sum bounds the RGB drift before the final rounding
    rgb = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    ycc = [to_uint8(c).astype(np.float64) for c in rgb_to_ycbcr(rgb)]
    inv = np.linalg.inv(np.array([[65.481, 128.553, 24.966], [-37.797, -74.203, 112.0],
                                  [112.0, -93.786, -18.214]])) * 255
    bound = 0.5 * np.abs(inv).sum(axis=1).max() + 0.5
    back = to_uint8(ycbcr_to_rgb(*ycc)).astype(int)
    assert np.max(np.abs(back - rgb)) <= np.floor(bound)


def test_luminance_quantises():
    rgb = np.array([[[10, 200, 30]]], dtype=np.uint8)
    y = luminance(rgb)
    assert y[0, 0] == np.round(rgb_to_ycbcr(rgb)[0][0, 0])
    assert luminance(rgb, quantize=False)[0, 0] != y[0, 0]


def test_to_uint8_rounds_half_away_and_clamps():
    np.testing.assert_array_equal(to_uint8([0.5, 1.5, 2.4999, -3.0, 300.0, 254.5]), [1, 2, 2, 0, 255, 255])


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_png_round_trip_grey(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("png") / "g.png"
    write_png(path, img)
    np.testing.assert_array_equal(read_png(path), img)


def test_png_round_trip_rgb(tmp_path, rng):
    img = rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)
    write_png(tmp_path / "c.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "c.png"), img)


def test_degrade_shapes_and_constant():
    y, x_b = degrade(np.full((96, 96), 77.0), 3)
    assert y.shape == (32, 32) and x_b.shape == (96, 96)
    np.testing.assert_allclose(y, 77.0, atol=1e-12)
    np.testing.assert_allclose(x_b, 77.0, atol=1e-12)


def test_degrade_base_is_bicubic_of_lr(camera):
    x = modcrop(camera[:100, :101], 3)
    y, x_b = degrade(x, 3)
    np.testing.assert_array_equal(y, bicubic_resample(x, Fraction(1, 3), antialias=True))
    np.testing.assert_array_equal(x_b, bicubic_resample(y, 3, antialias=False))


def test_degrade_requires_divisible_dims():
    with pytest.raises(ValueError, match="modcrop"):
        degrade(np.zeros((10, 9)), 3)


def test_degrade_noise_hook():
    y0, _ = degrade(np.full((12, 12), 50.0), 2)
    y1, _ = degrade(np.full((12, 12), 50.0), 2, noise_std=1.0, seed=0)
    assert not np.array_equal(y0, y1)


def test_modcrop():
    assert modcrop(np.zeros((100, 101)), 3).shape == (99, 99)
    assert modcrop(np.zeros((12, 13)), Fraction(5, 2)).shape == (10, 10)


def test_augment_count_and_tags(rng):
    img = rng.uniform(0, 255, (20, 24))
    out = augment([img, img[:18]])
    assert len(out) == 120
    tags = [t for i, t, _ in out if i == 0]
    assert tags == [(s, r, f) for s in AUG_SCALES for r in AUG_ROTATIONS for f in AUG_FLIPS]
    assert len(set(tags)) == 60


def test_augment_identity_and_group_law(rng):
    img = rng.uniform(0, 255, (20, 24))
    variants = {t: v for _, t, v in augment(img)}
    np.testing.assert_array_equal(variants[(1, 0, "none")], img)
    np.testing.assert_array_equal(variants[(1, 180, "none")], variants[(1, 0, "horizontal")][::-1])
    np.testing.assert_array_equal(variants[(1, 180, "none")], img[::-1, ::-1])
    assert variants[(Fraction(1, 2) + Fraction(1, 10), 90, "none")].shape == (15, 12)


def test_extract_patch_counts(rng):
    hr = rng.uniform(0, 255, (192, 192))
    ds = extract_patches([hr], 3, lr_patch=32, k=16)
    assert len(ds) == 9
    assert ds.lr.shape == (9, 1, 32, 32) and ds.hr.shape == (9, 1, 96, 96) and ds.base.shape == (9, 1, 96, 96)
    assert len(extract_patches([hr], 3, lr_patch=32, k=32)) == 4


def test_extract_patches_alignment_and_bases(camera):
    hr = modcrop(camera[:120, :150], 3)
    ds = extract_patches([hr], 3, lr_patch=16, k=8)
    y, _ = degrade(hr, 3)
    for i, (_, _, (r, c)) in enumerate(ds.provenance):
        np.testing.assert_allclose(ds.lr[i, 0], y[r:r + 16, c:c + 16], rtol=1e-6)
        np.testing.assert_allclose(ds.hr[i, 0], hr[3 * r:3 * r + 48, 3 * c:3 * c + 48], rtol=1e-6)
        base = bicubic_resample(ds.lr[i, 0].astype(np.float64), 3, antialias=False)
        np.testing.assert_allclose(ds.base[i, 0], base, rtol=1e-5, atol=1e-3)


def test_extract_patches_skips_small_images(rng):
    ds = extract_patches([rng.uniform(0, 255, (40, 40)), rng.uniform(0, 255, (60, 60))], 2, lr_patch=24, k=4)
    assert ds.skipped == 1
    assert len(ds) == 4 and {p[0] for p in ds.provenance} == {1}
    with pytest.raises(ValueError):
        extract_patches([], 2, k=0)


def test_extract_patches_fractional_scale(rng):
    ds = extract_patches([rng.uniform(0, 255, (50, 50))], Fraction(5, 2), lr_patch=8, k=4)
    assert ds.hr.shape[2:] == (20, 20) and len(ds) == 16
    with pytest.raises(ValueError):
        extract_patches([rng.uniform(0, 255, (50, 50))], Fraction(5, 2), lr_patch=8, k=3)


def test_prepare_dataset(tmp_path, rng):
    hr_dir = tmp_path / "Toy" / "HR"
    hr_dir.mkdir(parents=True)
    write_png(hr_dir / "a.png", rng.integers(0, 256, (31, 40, 3), dtype=np.uint8))
    write_png(hr_dir / "b.png", rng.integers(0, 256, (30, 30), dtype=np.uint8))
    assert [p.name for p in list_images(tmp_path, "Toy")] == ["a.png", "b.png"]
    written = prepare_dataset(tmp_path, "Toy", 3)
    assert [p.name for p in written] == ["a.png", "b.png"]
    assert read_png(tmp_path / "Toy" / "LR_x3" / "a.png").shape == (10, 13, 3)
    assert read_png(tmp_path / "Toy" / "LR_x3" / "bicubic" / "b.png").shape == (30, 30)
    assert scale_tag(Fraction(5, 2)) == "5_2"
    with pytest.raises(FileNotFoundError):
        list_images(tmp_path, "Missing")
