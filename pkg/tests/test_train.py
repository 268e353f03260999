import math
from dataclasses import replace

import pytest
import torch

from slagrade.backbone import GraderModel, ModelConfig, frozen_state, weights_digest
from slagrade.graders import response_examples
from slagrade.speechprior import CheckpointError, app_pretrain, read_container, write_container
from slagrade.train import (
    Example,
    TrainConfig,
    Trainer,
    TrainingDivergedError,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    session_examples,
    train,
)

CFG = TrainConfig(warmup_steps=10)


def test_lr_schedule_points():
    total = 110
    assert lr_at(0, total, CFG) == 0.0
    assert lr_at(10, total, CFG) == 1e-4
    assert abs(lr_at(60, total, CFG) - 0.5e-4) <= 1e-12
    assert lr_at(total, total, CFG) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        lr_at(total + 1, total, CFG)
    with pytest.raises(ValueError):
        lr_at(-1, total, CFG)


def test_lr_continuous_at_boundary():
    eps = 1e-9
    assert abs(lr_at(10 - eps, 110, CFG) - lr_at(10, 110, CFG)) < 1e-12
    assert abs(lr_at(10 + eps, 110, CFG) - lr_at(10, 110, CFG)) < 1e-12


def test_lr_monotone_phases():
    vals = [lr_at(k, 110, CFG) for k in range(111)]
    assert all(a <= b for a, b in zip(vals[:11], vals[1:11]))
    assert all(a >= b for a, b in zip(vals[10:], vals[11:]))


def test_config_validation():
    for bad in (dict(grad_accum=0), dict(epochs=0), dict(lr=-1.0), dict(clip_norm=0.0), dict(warmup_steps=-1)):
        with pytest.raises(ValueError):
            replace(CFG, **bad).validate()


def test_warmup_must_be_below_total(tiny_sessions, tiny_model_cfg):
    model = GraderModel(replace(tiny_model_cfg, use_prior=False))
    with pytest.raises(ValueError, match="warmup"):
        Trainer(model, session_examples(model, tiny_sessions), TrainConfig(warmup_steps=100))


def test_steps_per_epoch(tiny_sessions, tiny_model_cfg, tiny_train_cfg):
    model = GraderModel(replace(tiny_model_cfg, use_prior=False))
    t = Trainer(model, session_examples(model, tiny_sessions[:7]), tiny_train_cfg)
    assert t.steps_per_epoch == 4 and t.total_steps == 8
    t2 = Trainer(model, session_examples(model, tiny_sessions[:7]), replace(tiny_train_cfg, micro_batch=2))
    assert t2.steps_per_epoch == 2


def test_epoch_order_is_a_seeded_permutation(tiny_sessions, tiny_model_cfg, tiny_train_cfg):
    model = GraderModel(replace(tiny_model_cfg, use_prior=False))
    t = Trainer(model, session_examples(model, tiny_sessions), tiny_train_cfg)
    assert sorted(t.epoch_order(0)) == list(range(8))
    assert (t.epoch_order(0) == t.epoch_order(0)).all()
    assert not (t.epoch_order(0) == t.epoch_order(1)).all()


def _fit(sessions, mcfg, tcfg, app=None):
    model = GraderModel(mcfg)
    _, trainer = train(model, sessions, tcfg, app)
    return model, trainer


def test_training_deterministic(tiny_sessions, tiny_model_cfg, tiny_train_cfg):
    app = app_pretrain(tiny_sessions, epochs=2)
    a, ta = _fit(tiny_sessions, tiny_model_cfg, tiny_train_cfg, app)
    b, tb = _fit(tiny_sessions, tiny_model_cfg, tiny_train_cfg, app)
    assert weights_digest(a) == weights_digest(b)
    assert [r.loss for r in ta.history] == [r.loss for r in tb.history]


def test_zero_lr_keeps_weights(tiny_sessions, tiny_model_cfg, tiny_train_cfg):
    mcfg = replace(tiny_model_cfg, use_prior=False)
    before = weights_digest(GraderModel(mcfg))
    model, _ = _fit(tiny_sessions, mcfg, replace(tiny_train_cfg, lr=0.0))
    assert weights_digest(model) == before


def test_frozen_base_and_clipping(tiny_sessions, tiny_model_cfg, tiny_train_cfg):
    app = app_pretrain(tiny_sessions, epochs=2)
    enc_before = {k: v.clone() for k, v in app.encoder.state_dict().items()}
    model = GraderModel(tiny_model_cfg)
    frozen = frozen_state(model)
    trainable_before = {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}
    # a large lr and tight clip make clipping active
    _, trainer = train(model, tiny_sessions, replace(tiny_train_cfg, clip_norm=0.05, lr=1e-2), app)
    state = model.state_dict()
    for k, v in frozen.items():
        assert torch.equal(state[k], v), k
    for k, v in app.encoder.state_dict().items():
        assert torch.equal(v, enc_before[k])
    assert any(not torch.equal(p, trainable_before[n]) for n, p in model.named_parameters() if p.requires_grad)
    assert any(r.grad_norm > 0.05 for r in trainer.history)
    assert all(r.clipped_norm <= 0.05 + 1e-6 for r in trainer.history)


def test_divergence_reports_step(tiny_sessions, tiny_model_cfg, tiny_train_cfg):
    model = GraderModel(replace(tiny_model_cfg, use_prior=False))
    ex = session_examples(model, tiny_sessions)
    ex = [Example(e.layout, e.prior, torch.full((5,), math.nan, dtype=torch.float64), e.mask) for e in ex]
    with pytest.raises(TrainingDivergedError) as err:
        Trainer(model, ex, tiny_train_cfg).run()
    assert err.value.step == 0


def test_loss_decreases(tiny_sessions, tiny_model_cfg):
    model = GraderModel(replace(tiny_model_cfg, use_prior=False))
    _, trainer = train(model, tiny_sessions, TrainConfig(lr=3e-3, warmup_steps=1, grad_accum=2, epochs=6))
    losses = trainer.epoch_losses()
    assert len(losses) == 6 and losses[-1] < losses[0]


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_sessions, tiny_model_cfg, tiny_train_cfg):
    app = app_pretrain(tiny_sessions, epochs=2)
    model = GraderModel(tiny_model_cfg)
    trainer = Trainer(model, session_examples(model, tiny_sessions, app), tiny_train_cfg)
    trainer.run(until_step=3)
    save_checkpoint(tmp_path / "c.pt", model, trainer, app, meta={"mode": "mtl_app"})
    ck = load_checkpoint(tmp_path / "c.pt", expect=tiny_model_cfg)
    for (k1, v1), (k2, v2) in zip(model.state_dict().items(), ck.model.state_dict().items()):
        assert k1 == k2 and v1.dtype == v2.dtype and torch.equal(v1, v2)
    assert ck.meta == {"mode": "mtl_app"} and ck.rng["next_step"] == 3
    assert torch.equal(ck.app.prior(tiny_sessions[0]), app.prior(tiny_sessions[0]))
    save_checkpoint(tmp_path / "d.pt", ck.model, None, ck.app, meta=ck.meta)
    save_checkpoint(tmp_path / "e.pt", model, None, app, meta={"mode": "mtl_app"})
    assert (tmp_path / "d.pt").read_bytes() == (tmp_path / "e.pt").read_bytes()


def test_checkpoint_mismatch_names_field(tmp_path, tiny_model_cfg):
    save_checkpoint(tmp_path / "c.pt", GraderModel(tiny_model_cfg))
    with pytest.raises(CheckpointError, match="d_model"):
        load_checkpoint(tmp_path / "c.pt", expect=replace(tiny_model_cfg, d_model=32))


def test_checkpoint_corruption(tmp_path, tiny_model_cfg):
    save_checkpoint(tmp_path / "c.pt", GraderModel(tiny_model_cfg))
    raw = (tmp_path / "c.pt").read_bytes()
    (tmp_path / "t.pt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.pt")
    (tmp_path / "g.pt").write_bytes(b"garbage" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "g.pt")
    blob = read_container(tmp_path / "c.pt")
    blob["version"] = 99
    write_container(blob, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.pt")


@pytest.mark.parametrize("stop", [1, 3, 5])
def test_resume_is_bit_exact(tmp_path, tiny_sessions, tiny_model_cfg, tiny_train_cfg, stop):
    app = app_pretrain(tiny_sessions, epochs=2)
    straight = GraderModel(tiny_model_cfg)
    ts = Trainer(straight, session_examples(straight, tiny_sessions, app), tiny_train_cfg)
    ts.run()
    save_checkpoint(tmp_path / "straight.pt", straight, ts, app)

    part = GraderModel(tiny_model_cfg)
    tp = Trainer(part, session_examples(part, tiny_sessions, app), tiny_train_cfg)
    tp.run(until_step=stop)
    save_checkpoint(tmp_path / "mid.pt", part, tp, app)
    del part, tp

    ck = load_checkpoint(tmp_path / "mid.pt", expect=tiny_model_cfg)
    tr = Trainer(ck.model, session_examples(ck.model, tiny_sessions, ck.app), tiny_train_cfg)
    tr.load_state_dict(ck.trainer_state)
    tr.run()
    save_checkpoint(tmp_path / "resumed.pt", ck.model, tr, ck.app)
    assert (tmp_path / "resumed.pt").read_bytes() == (tmp_path / "straight.pt").read_bytes()


def test_resume_rejects_other_config(tmp_path, tiny_sessions, tiny_model_cfg, tiny_train_cfg):
    model = GraderModel(replace(tiny_model_cfg, use_prior=False))
    t = Trainer(model, session_examples(model, tiny_sessions), tiny_train_cfg)
    state = t.state_dict()
    other = Trainer(model, session_examples(model, tiny_sessions), replace(tiny_train_cfg, lr=5e-3))
    with pytest.raises(CheckpointError):
        other.load_state_dict(state)


def test_response_examples_masked(tiny_sessions, tiny_model_cfg):
    model = GraderModel(replace(tiny_model_cfg, use_prior=False))
    ex = response_examples(model, tiny_sessions[:1])
    assert len(ex) == 13
    assert all(e.mask.tolist() == [False] * 4 + [True] for e in ex)
