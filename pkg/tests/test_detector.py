import json

import numpy as np
import pytest

from stainscope.ae.layers import Autoencoder, Sigmoid, build_autoencoder
from stainscope.detector import (
    BROWN_BAND,
    BrownBand,
    PatchScore,
    Thresholds,
    baseline_red_fraction,
    brown_count,
    classify_patch,
    f_brown,
    score_patches,
    score_slide,
    slide_probability,
)
from stainscope.errors import EmptySlideError, InvalidInputError
from stainscope.imaging import Patch
from stainscope.synth import gen_synthetic_slide


def _band_img(n_in_band, size=16):
    img = np.zeros((size, size, 3), dtype=np.uint8)
    img[..., 2] = 255  # hue 240
    flat = img.reshape(-1, 3)
    flat[:n_in_band] = (180, 40, 30)  # c=150, hue=60*(40-30)/150=4 deg
    return img


def test_brown_count_exact():
    assert brown_count(_band_img(0)) == 0
    assert brown_count(_band_img(7)) == 7
    assert brown_count(_band_img(256)) == 256
    narrow = BrownBand(lo=3.0, hi=5.0)
    assert brown_count(_band_img(7), narrow) == 7
    miss = BrownBand(lo=5.0, hi=9.0)
    assert brown_count(_band_img(7), miss) == 0


def test_f_brown_formula_and_validation():
    s = f_brown(_band_img(30), _band_img(5))
    assert (s.n_orig, s.n_rec) == (30, 5)
    assert s.f_brown == pytest.approx((30 + 1) / (5 + 1))
    s2 = f_brown(_band_img(0), _band_img(0), epsilon=0.5)
    assert s2.f_brown == 1.0
    with pytest.raises(InvalidInputError):
        f_brown(_band_img(1), _band_img(1)[:8])
    with pytest.raises(InvalidInputError):
        f_brown(_band_img(1), _band_img(1), epsilon=0.0)


def test_f_brown_epsilon_bounds_the_score():
    # worst case: every pixel brown originally, none reconstructed
    n = 16 * 16
    s = f_brown(_band_img(n), _band_img(0))
    assert s.f_brown == pytest.approx(n + 1)
    # symmetric case: reconstruction invents brown
    s2 = f_brown(_band_img(0), _band_img(n))
    assert s2.f_brown == pytest.approx(1 / (n + 1))


def test_classify_patch_threshold_inclusive():
    s = PatchScore("p", 10, 4, 2.0)
    assert classify_patch(s, 2.0)
    assert classify_patch(s, 1.9)
    assert not classify_patch(s, 2.0000001)


def test_slide_probability_percent_and_flags():
    scores = [PatchScore(f"p{i}", 0, 0, v) for i, v in enumerate([0.5, 1.5, 2.5, 3.5])]
    frac = slide_probability(scores, t_patch=1.5)
    assert frac == pytest.approx(75.0)
    assert [s.positive for s in scores] == [False, True, True, True]
    with pytest.raises(EmptySlideError):
        slide_probability([], 1.0)


def test_baseline_red_fraction():
    img = _band_img(64, size=16)
    assert baseline_red_fraction(img) == pytest.approx(64 / 256)
    assert baseline_red_fraction(_band_img(0)) == 0.0


def test_thresholds_json_round_trip():
    t = Thresholds(t_patch=1.25, t_slide=40.0, patch_auc=0.97, slide_auc=1.0)
    back = Thresholds.from_json(t.to_json())
    assert back == t
    with pytest.raises(InvalidInputError):
        Thresholds.from_json("{}")
    with pytest.raises(InvalidInputError):
        Thresholds.from_json("not json")


class _IdentityModel:
    """Stands in for an Autoencoder: reproduces its input exactly."""

    def forward(self, x, training=False):
        return x


def _patches_from(imgs):
    return [
        Patch("s", (i * 8, 0), (i * 8 + 4, 4), img) for i, img in enumerate(imgs)
    ]


def test_score_patches_identity_model_scores_one():
    imgs = [_band_img(k) for k in (0, 3, 50)]
    scores = score_patches(_IdentityModel(), _patches_from(imgs))
    # perfect reconstruction: n_orig == n_rec, so every score is exactly 1
    assert [s.f_brown for s in scores] == [1.0, 1.0, 1.0]
    assert [s.n_orig for s in scores] == [0, 3, 50]
    assert scores[1].patch_id == "s_x8_y0"


def test_score_patches_order_and_jobs_invariance():
    rng = np.random.default_rng(30)
    imgs = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(11)]
    patches = _patches_from(imgs)
    model = _IdentityModel()
    one = score_patches(model, patches, batch_size=3, jobs=1)
    many = score_patches(model, patches, batch_size=3, jobs=4)
    assert [s.patch_id for s in one] == [p.patch_id for p in patches]
    assert one == many
    assert score_patches(model, []) == []


def test_score_patches_with_real_model_runs():
    model = build_autoencoder(seed=0)
    rng = np.random.default_rng(31)
    imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(3)]
    scores = score_patches(model, _patches_from(imgs), batch_size=2)
    assert len(scores) == 3
    for s in scores:
        assert s.f_brown > 0
        assert s.n_orig >= 0 and s.n_rec >= 0


def test_score_slide_end_to_end_small():
    from stainscope.synth import SynthSpec

    spec = SynthSpec(slide_size=512)
    img, truth = gen_synthetic_slide(3, density="high", spec=spec)
    scores = score_slide(
        img,
        _IdentityModel(),
        Thresholds(t_patch=1.5, t_slide=30.0),
        slide_id="demo",
    )
    assert scores.slide_id == "demo"
    assert scores.patch_scores
    # identity reconstruction keeps every brown pixel: all scores 1, negative
    assert all(s.f_brown == 1.0 for s in scores.patch_scores)
    assert scores.positive_fraction == 0.0
    assert scores.diagnosis == "negative"
    raw = json.loads(scores.to_json())
    assert raw["slide_id"] == "demo"
    assert raw["thresholds"] == {"t_patch": 1.5, "t_slide": 30.0}
    assert len(raw["patches"]) == len(scores.patch_scores)
    assert all(p["positive"] is False for p in raw["patches"])


def test_score_slide_empty_raises():
    blank = np.full((512, 512, 3), 230, dtype=np.uint8)
    with pytest.raises(EmptySlideError):
        with pytest.warns(UserWarning):
            score_slide(blank, _IdentityModel(), Thresholds(1.0, 50.0))


def test_brown_band_defaults():
    assert BROWN_BAND == BrownBand(-20.0, 20.0, 0.0, 0.0)
    assert Sigmoid is not None and Autoencoder is not None  # re-export sanity
