import json

import pytest

from stainscope.config import RunConfig, load_config
from stainscope.detector import BrownBand
from stainscope.errors import ConfigError, ManifestError
from stainscope.manifest import (
    MANIFEST_VERSION,
    Manifest,
    PatchRecord,
    SlideRecord,
    load_manifest,
)


def _touch(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"png")


def _manifest(tmp_path, with_files=True):
    slides = [
        SlideRecord(
            "s1",
            "slides/s1.png",
            diagnosis="positive",
            split="train",
            patches=[
                PatchRecord("patches/s1_x0_y0.png", (0, 0), "positive"),
                PatchRecord("patches/s1_x128_y0.png", (128, 0), "unlabeled"),
            ],
        ),
        SlideRecord("s2", "slides/s2.png", diagnosis="negative", split="test"),
    ]
    m = Manifest(slides=slides)
    if with_files:
        _touch(tmp_path / "slides" / "s1.png")
        _touch(tmp_path / "slides" / "s2.png")
        _touch(tmp_path / "patches" / "s1_x0_y0.png")
    return m


# ---------------------------------------------------------------- manifest


def test_manifest_save_load_round_trip(tmp_path):
    m = _manifest(tmp_path)
    m.save(tmp_path / "manifest.json")
    assert m.root == tmp_path
    loaded = load_manifest(tmp_path / "manifest.json")
    assert loaded.version == MANIFEST_VERSION
    assert loaded.to_json() == m.to_json()
    assert loaded.slides[0].patches[0].origin == (0, 0)
    assert loaded.resolve("slides/s1.png") == tmp_path / "slides" / "s1.png"


def test_manifest_slides_in_filters(tmp_path):
    m = _manifest(tmp_path, with_files=False)
    assert [s.slide_id for s in m.slides_in(split="train")] == ["s1"]
    assert [s.slide_id for s in m.slides_in(diagnosis="negative")] == ["s2"]
    assert m.slides_in(split="train", diagnosis="negative") == []
    assert len(m.slides_in()) == 2


def test_manifest_validate_catches_bad_entries(tmp_path):
    m = _manifest(tmp_path)
    m.slides.append(SlideRecord("s1", "slides/dup.png"))
    with pytest.raises(ManifestError, match="duplicate"):
        m.validate(check_paths=False)

    m = _manifest(tmp_path, with_files=False)
    m.slides[0].diagnosis = "maybe"
    with pytest.raises(ManifestError, match="bad diagnosis"):
        m.validate(check_paths=False)

    m = _manifest(tmp_path, with_files=False)
    m.slides[1].split = "holdout"
    with pytest.raises(ManifestError, match="bad split"):
        m.validate(check_paths=False)

    m = _manifest(tmp_path, with_files=False)
    m.slides[0].patches[0].label = "brownish"
    with pytest.raises(ManifestError, match="bad label"):
        m.validate(check_paths=False)


def test_manifest_validate_checks_paths(tmp_path):
    m = _manifest(tmp_path)
    m.root = tmp_path
    m.validate(check_paths=True)  # labeled patch + images exist; unlabeled skipped
    (tmp_path / "slides" / "s2.png").unlink()
    with pytest.raises(ManifestError, match="missing image"):
        m.validate(check_paths=True)
    _touch(tmp_path / "slides" / "s2.png")
    (tmp_path / "patches" / "s1_x0_y0.png").unlink()
    with pytest.raises(ManifestError, match="missing labeled patch"):
        m.validate(check_paths=True)


def test_load_manifest_errors(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.json")

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ManifestError, match="not valid JSON"):
        load_manifest(bad)

    bad.write_text(json.dumps({"version": 1}))
    with pytest.raises(ManifestError, match="missing 'slides'"):
        load_manifest(bad)

    bad.write_text(json.dumps({"version": 99, "slides": []}))
    with pytest.raises(ManifestError, match="version"):
        load_manifest(bad)

    bad.write_text(json.dumps({"version": 1, "slides": [{"slide_id": "x"}]}))
    with pytest.raises(ManifestError, match="malformed"):
        load_manifest(bad)


def test_manifest_json_is_canonical(tmp_path):
    m = _manifest(tmp_path, with_files=False)
    text = m.to_json()
    assert text.endswith("\n")
    assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------- config


def test_config_defaults_and_band():
    cfg = RunConfig()
    assert cfg.band == BrownBand(-20.0, 20.0, 0.0, 0.0)
    assert cfg.stride == 128
    assert cfg.k_folds == 5
    tc = cfg.train_config()
    assert tc.batch_size == cfg.batch_size
    assert tc.seed == cfg.seed


def test_config_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"stride": 64, "epsilon": 2.0}))
    cfg = load_config(path, overrides={"epsilon": 3.0})
    assert cfg.stride == 64  # from file
    assert cfg.epsilon == 3.0  # override beats file
    assert cfg.batch_size == 32  # default


def test_config_unknown_keys_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"strides": 64}))
    with pytest.raises(ConfigError, match="unknown config keys: strides"):
        load_config(path)
    with pytest.raises(ConfigError):
        RunConfig().replaced({"not_a_key": 1})


def test_config_type_checking():
    with pytest.raises(ConfigError, match="expected an integer"):
        load_config(overrides={"stride": 1.5})
    with pytest.raises(ConfigError, match="expected a number"):
        load_config(overrides={"stride": True})
    with pytest.raises(ConfigError, match="expected a number"):
        load_config(overrides={"stride": "128"})
    cfg = load_config(overrides={"stride": 64.0})  # integral float accepted
    assert cfg.stride == 64 and isinstance(cfg.stride, int)


def test_config_value_validation():
    for bad in (
        {"stride": 0},
        {"k_folds": 1},
        {"jobs": 0},
        {"epsilon": 0.0},
        {"crops_per_slide": 0},
        {"mvgd_lambda": -1.0},
    ):
        with pytest.raises(ConfigError):
            load_config(overrides=bad)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(bad)
    bad.write_text("{oops")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_config_replaced_keeps_immutability():
    cfg = RunConfig()
    new = cfg.replaced({"stride": 256})
    assert new.stride == 256
    assert cfg.stride == 128
    with pytest.raises(Exception):
        cfg.stride = 1  # frozen dataclass
