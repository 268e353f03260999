import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slagrade.corpus import GenConfig, generate_corpus
from slagrade.evaluation import rmse
from slagrade.speechprior import (
    AppGrader,
    AppHead,
    AppTrainConfig,
    CheckpointError,
    FrozenEncoder,
    NonFiniteError,
    app_expected_score,
    app_pretrain,
    load_app_bundle,
    mean_pool,
    save_app_bundle,
    write_container,
)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10_000), st.integers(1, 8), st.integers(0, 2**31))
def test_mean_pool_matches_brute_force(rows, cols, seed):
    h = torch.from_numpy(np.random.default_rng(seed).standard_normal((rows, cols)))
    cols_list = h.numpy().T.tolist()
    brute = [math.fsum(col) / rows for col in cols_list]
    np.testing.assert_allclose(mean_pool(h).numpy(), brute, rtol=0, atol=1e-7)


def test_mean_pool_rejects_empty():
    with pytest.raises(ValueError):
        mean_pool(torch.zeros(0, 4))


def test_encoder_deterministic_and_checked():
    a, b = FrozenEncoder(16, 32, 5), FrozenEncoder(16, 32, 5)
    assert torch.equal(a.weight, b.weight)
    assert not any(p.requires_grad for p in a.parameters())
    x = np.random.default_rng(0).standard_normal((7, 16)).astype(np.float32)
    out = a(x)
    assert out.shape == (7, 32) and bool((out.abs() <= 1).all())
    with pytest.raises(ValueError):
        a(np.zeros((3, 15), np.float32))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_prior_is_a_simplex(seed):
    g = torch.Generator().manual_seed(seed)
    head = AppHead(seed=seed % 97)
    pooled = torch.randn(4, 32, generator=g) * 5
    for train_mode in (False, True):
        p = head(pooled, train_mode=train_mode, generator=g)
        assert bool((p >= 0).all())
        assert torch.allclose(p.sum(-1), torch.ones(4), atol=1e-6)


def test_expected_score_bounds_on_random_simplex():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.full(8, 0.3), size=100_000)
    s = app_expected_score(probs)
    assert s.min() >= 2.0 and s.max() <= 5.5
    one_hot = np.eye(8)
    np.testing.assert_array_equal(app_expected_score(one_hot), [2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5])


def test_uniform_prior_expects_centre():
    assert app_expected_score(np.full(8, 1 / 8)) == 3.75
    assert float(app_expected_score(torch.full((8,), 1 / 8, dtype=torch.float64))) == 3.75


def test_zero_final_layer_predicts_centre(default_sessions):
    bundle = app_pretrain(default_sessions, epochs=0)
    with torch.no_grad():
        bundle.head.fc2.weight.zero_()
        bundle.head.fc2.bias.zero_()
    assert bundle.predict_session(default_sessions[0]) == 3.75


def test_dropout_off_in_eval():
    head = AppHead(dropout=0.5)
    x = torch.randn(3, 32)
    assert torch.equal(head(x), head(x))
    g1, g2 = torch.Generator().manual_seed(1), torch.Generator().manual_seed(1)
    assert torch.equal(head(x, True, g1), head(x, True, g2))


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        AppHead()(torch.full((32,), float("nan")))


def test_training_deterministic_and_encoder_frozen(tiny_sessions):
    enc = FrozenEncoder(16)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    a = app_pretrain(tiny_sessions, epochs=3, seed=2, encoder=enc)
    b = app_pretrain(tiny_sessions, epochs=3, seed=2)
    for k, v in enc.state_dict().items():
        assert torch.equal(v, before[k])
    for (ka, va), (kb, vb) in zip(a.head.state_dict().items(), b.head.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert not any(p.requires_grad for p in a.head.parameters())


def test_noiseless_corpus_learnable():
    cfg = GenConfig(part_noise_sd=0.0, frame_period_s=1.0)
    train = generate_corpus(300, 1, cfg)
    test = generate_corpus(100, 2, cfg)
    bundle = app_pretrain(train, "overall", epochs=60, seed=0)
    preds = [bundle.predict_session(s) for s in test]
    assert rmse(preds, [s.labels.overall for s in test]) <= 0.25


def test_part_target_and_grader(tiny_sessions):
    grader = AppGrader.fit(tiny_sessions, cfg=AppTrainConfig(epochs=2))
    p = grader.predict(tiny_sessions[0])
    assert p.part_mean_overall == (p.p1 + p.p3 + p.p4 + p.p5) / 4.0
    assert all(2.0 <= v <= 5.5 for v in p.parts())
    with pytest.raises(ValueError):
        app_pretrain(tiny_sessions, "p2")


def test_bundle_round_trip(tmp_path, tiny_sessions):
    bundle = app_pretrain(tiny_sessions, epochs=2)
    save_app_bundle(bundle, tmp_path / "a.pt")
    back = load_app_bundle(tmp_path / "a.pt", expect_d_feat=16)
    for m1, m2 in ((bundle.encoder, back.encoder), (bundle.head, back.head)):
        for (k1, v1), (k2, v2) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert k1 == k2 and torch.equal(v1, v2)
    assert torch.equal(bundle.prior(tiny_sessions[0]), back.prior(tiny_sessions[0]))
    save_app_bundle(back, tmp_path / "b.pt")
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()


def test_bundle_errors(tmp_path, tiny_sessions):
    bundle = app_pretrain(tiny_sessions, epochs=1)
    save_app_bundle(bundle, tmp_path / "a.pt")
    with pytest.raises(CheckpointError, match="d_feat"):
        load_app_bundle(tmp_path / "a.pt", expect_d_feat=8)
    raw = (tmp_path / "a.pt").read_bytes()
    (tmp_path / "bad.pt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_app_bundle(tmp_path / "bad.pt")
    write_container({"format": "other", "version": 1}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError, match="not a slagrade-app"):
        load_app_bundle(tmp_path / "other.pt")
    torch.save({"weights": torch.zeros(2)}, tmp_path / "foreign.pt")
    with pytest.raises(CheckpointError, match="not a checkpoint container"):
        load_app_bundle(tmp_path / "foreign.pt")
    with pytest.raises(FileNotFoundError):
        load_app_bundle(tmp_path / "missing.pt")
