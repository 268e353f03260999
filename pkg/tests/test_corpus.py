import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slagrade import corpus
from slagrade.corpus import (
    RESPONSES_PER_PART,
    DimensionMismatchError,
    FeatureHeaderError,
    FeatureLengthError,
    GenConfig,
    ManifestParseError,
    MissingFileError,
    apply_label_dropout,
    corpus_digest,
    expected_spread_std,
    generate_corpus,
    noise_floor,
    read_corpus,
    read_features,
    write_corpus,
    write_features,
)
from slagrade.scale import PARTS, band_values, overall_from_parts


def test_reproducible(tiny_gen):
    a = generate_corpus(5, 3, tiny_gen)
    b = generate_corpus(5, 3, tiny_gen)
    assert a == b
    assert generate_corpus(5, 4, tiny_gen) != a


def test_prefix_extension(tiny_gen):
    small = generate_corpus(3, 9, tiny_gen)
    big = generate_corpus(6, 9, tiny_gen)
    assert big[:3] == small


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_session_invariants(seed):
    (s,) = generate_corpus(1, seed)
    s.validate()
    counts = {p: len(s.part_responses(p)) for p in PARTS}
    assert counts == RESPONSES_PER_PART == {"P1": 6, "P3": 1, "P4": 1, "P5": 5}
    assert all(p in band_values() for p in s.labels.parts())
    assert s.labels.overall == overall_from_parts(s.labels.parts())
    for r in s.responses:
        assert r.features.dtype == np.float32 and r.features.shape[1] == 16
        assert np.isfinite(r.features).all()
        assert r.duration_s == pytest.approx(r.t_frames * 0.2)


def test_durations_follow_time_limits():
    sessions = generate_corpus(50, 2)
    for s in sessions:
        for r in s.responses:
            limit = corpus.PROMPTS[r.part][r.index_in_part][0]
            assert 0.2 * limit - 0.2 <= r.duration_s <= limit + 1e-9


def test_delivery_channel_recovers_latent():
    n, seed = 1000, 21
    sessions = generate_corpus(n, seed)
    theta = np.array([corpus._session_rng(seed, i).uniform(2.0, 5.5) for i in range(n)])
    x = np.array([np.concatenate([r.features[:, 0] for r in s.responses]).mean() for s in sessions])
    design = np.column_stack([x, np.ones(n)])
    coef, *_ = np.linalg.lstsq(design, theta, rcond=None)
    fitted = design @ coef
    assert np.corrcoef(fitted, theta)[0, 1] >= 0.9


def test_noiseless_labels_are_latent_bands():
    cfg = GenConfig(part_noise_sd=0.0)
    seed = 4
    sessions = generate_corpus(40, seed, cfg)
    for i, s in enumerate(sessions):
        theta = corpus._session_rng(seed, i).uniform(2.0, 5.5)
        expected = float(np.clip(math.floor((theta - 2.0) / 0.5 + 0.5) * 0.5 + 2.0, 2.0, 5.5))
        assert s.labels.parts() == (expected,) * 4


def test_expected_spread_matches_simulation():
    cfg = GenConfig()
    rng = np.random.default_rng(0)
    for n in (5, 6):
        spread = rng.uniform(0, cfg.inconsistency_ratio * cfg.part_noise_sd, 200_000)
        sim = (spread * rng.standard_normal((n, spread.size)).std(axis=0)).mean()
        assert expected_spread_std(n, cfg) == pytest.approx(sim, abs=2e-3)
    assert expected_spread_std(1, cfg) == 0.0


def test_label_means_unbiased():
    labels = np.array([s.labels.as_tuple() for s in generate_corpus(4000, 8)])
    np.testing.assert_allclose(labels.mean(axis=0), 3.75, atol=0.04)


def test_noise_floor_monte_carlo():
    sd = 0.25
    rng = np.random.default_rng(1)
    theta = rng.uniform(2.0, 5.5, 400_000)
    raw = theta[:, None] + sd * rng.standard_normal((theta.size, 2))
    q = np.clip(np.floor((raw - 2.0) / 0.5 + 0.5) * 0.5 + 2.0, 2.0, 5.5)
    # two independent draws share theta: E[(a-b)^2] / 2 is the conditional variance
    part_var = np.mean((q[:, 0] - q[:, 1]) ** 2) / 2
    floor = noise_floor(GenConfig(part_noise_sd=sd))
    assert floor["p1"] == pytest.approx(math.sqrt(part_var), abs=3e-3)
    assert floor["overall"] == pytest.approx(math.sqrt(part_var / 4), abs=2e-3)
    assert noise_floor(GenConfig(part_noise_sd=0.0))["overall"] == 0.0


def test_label_dropout():
    sessions = generate_corpus(400, 1)
    dropped = apply_label_dropout(sessions, 0.3, seed=2)
    masks = np.array([s.mask for s in dropped])
    assert abs(1 - masks[:, :4].mean() - 0.3) < 0.03
    assert (masks[:, 4] == masks[:, :4].all(axis=1)).all()
    assert masks.any(axis=1).all()
    assert apply_label_dropout(sessions, 0.3, seed=2) == dropped
    assert all(s.mask == (True,) * 5 for s in apply_label_dropout(sessions, 0.0, 2))
    with pytest.raises(ValueError):
        apply_label_dropout(sessions, 1.0, 0)


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(d_feat=1).validate()
    with pytest.raises(ValueError):
        GenConfig(part_noise_sd=-1).validate()
    with pytest.raises(ValueError):
        generate_corpus(0, 1)


# -- serialization ------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 2**31))
def test_feature_blob_round_trip(tmp_path_factory, t, d, seed):
    path = tmp_path_factory.mktemp("blob") / "x.sgf"
    x = np.random.default_rng(seed).standard_normal((t, d)).astype(np.float32)
    x[0, 0] = np.float32(-0.0)
    write_features(path, x)
    y = read_features(path)
    assert y.dtype == np.float32 and y.tobytes() == x.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"SGF1" and struct.unpack("<II", raw[4:12]) == (t, d)
    assert len(raw) == 12 + 4 * t * d


def test_feature_blob_errors(tmp_path):
    path = tmp_path / "x.sgf"
    write_features(path, np.ones((3, 2), np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(FeatureLengthError):
        read_features(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FeatureHeaderError):
        read_features(path)
    path.write_bytes(raw[:6])
    with pytest.raises(FeatureHeaderError):
        read_features(path)
    with pytest.raises(MissingFileError):
        read_features(tmp_path / "nope.sgf")


def test_corpus_round_trip(tmp_path, tiny_sessions):
    sessions = apply_label_dropout(tiny_sessions, 0.3, 0)
    write_corpus(sessions, tmp_path)
    back = read_corpus(tmp_path)
    assert back == sessions
    first = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert set(first) == {"session_id", "labels", "mask", "responses"}
    assert set(first["responses"][0]) == {"part", "index", "prompt", "feature_file", "t_frames", "d_feat", "duration_s"}


def test_corpus_write_deterministic(tmp_path, tiny_sessions):
    write_corpus(tiny_sessions, tmp_path / "a")
    write_corpus(tiny_sessions, tmp_path / "b")
    assert corpus_digest(tmp_path / "a") == corpus_digest(tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def _rewrite_line(path, lineno, fn):
    lines = path.read_text().splitlines()
    lines[lineno - 1] = fn(lines[lineno - 1])
    path.write_text("\n".join(lines) + "\n")


def test_manifest_unknown_part_names_line(tmp_path, tiny_sessions):
    write_corpus(tiny_sessions[:3], tmp_path)
    _rewrite_line(tmp_path / "manifest.jsonl", 2, lambda s: s.replace('"part": "P4"', '"part": "P2"'))
    with pytest.raises(ManifestParseError) as err:
        read_corpus(tmp_path)
    assert err.value.line == 2 and "manifest.jsonl:2:" in str(err.value)


def test_manifest_bad_json(tmp_path, tiny_sessions):
    write_corpus(tiny_sessions[:3], tmp_path)
    _rewrite_line(tmp_path / "manifest.jsonl", 3, lambda s: s[:-5])
    with pytest.raises(ManifestParseError) as err:
        read_corpus(tmp_path)
    assert err.value.line == 3


def test_manifest_dimension_mismatch(tmp_path, tiny_sessions):
    write_corpus(tiny_sessions[:2], tmp_path)
    _rewrite_line(tmp_path / "manifest.jsonl", 1, lambda s: s.replace('"d_feat": 16', '"d_feat": 8', 1))
    with pytest.raises(DimensionMismatchError):
        read_corpus(tmp_path)


def test_missing_feature_file(tmp_path, tiny_sessions):
    write_corpus(tiny_sessions[:2], tmp_path)
    next((tmp_path / "features").iterdir()).unlink()
    with pytest.raises(MissingFileError):
        read_corpus(tmp_path)


def test_truncated_feature_in_corpus(tmp_path, tiny_sessions):
    write_corpus(tiny_sessions[:1], tmp_path)
    f = sorted((tmp_path / "features").iterdir())[0]
    f.write_bytes(f.read_bytes()[:-1])
    with pytest.raises(FeatureLengthError):
        read_corpus(tmp_path)
