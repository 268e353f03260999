"""Deterministic fine-tuning loop and checkpoint container.

Recipe: AdamW over the trainable set only, linear warm-up then cosine decay
to zero over the whole run, global-norm clipping, micro-batches accumulated
into one optimizer step. Data order is a fixed permutation per epoch derived
from ``(seed, epoch)``, so a run can be stopped at any optimizer step and
resumed bit-exactly from a checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import GraderModel, ModelConfig, SessionLayout, trainable_parameters
from .objective import masked_mse
from .speechprior import (
    APP_VERSION,
    AppBundle,
    AppHead,
    CheckpointError,
    FrozenEncoder,
    _check_container,
    read_container,
    write_container,
)

CKPT_FORMAT = "slagrade-grader"
CKPT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step, self.loss = step, loss
        super().__init__(f"non-finite loss {loss} at optimizer step {step}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 100
    clip_norm: float = 1.0
    micro_batch: int = 1
    grad_accum: int = 8
    epochs: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        for name in ("micro_batch", "grad_accum", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.warmup_steps < 0 or self.clip_norm <= 0:
            raise ValueError("warmup_steps must be >= 0 and clip_norm > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``cfg.lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr * step / w
    if total_steps == w:
        return cfg.lr
    progress = (step - w) / (total_steps - w)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Example:
    """One training unit: a frozen layout, its prior (if any) and masked targets."""

    layout: SessionLayout
    prior: torch.Tensor | None
    target: torch.Tensor
    mask: torch.Tensor


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    grad_norm: float
    clipped_norm: float


def session_examples(model: GraderModel, sessions, app: AppBundle | None = None) -> list[Example]:
    if model.cfg.use_prior and app is None:
        raise ValueError("model uses a prior prefix; pass the APP bundle")
    out = []
    for s in sessions:
        prior = app.prior(s) if model.cfg.use_prior else None
        out.append(Example(
            model.layout(s),
            prior,
            torch.tensor(s.labels.as_tuple(), dtype=torch.float64),
            torch.tensor(s.mask, dtype=torch.bool),
        ))
    return out


class Trainer:
    """Owns the optimizer and the step counter for one model."""

    def __init__(self, model: GraderModel, examples: Sequence[Example], cfg: TrainConfig,
                 on_step: Callable[[StepRecord], None] | None = None):
        cfg.validate()
        if not examples:
            raise ValueError("empty training set")
        self.model, self.examples, self.cfg = model, list(examples), cfg
        self.on_step = on_step
        n_micro = -(-len(self.examples) // cfg.micro_batch)
        self.steps_per_epoch = -(-n_micro // cfg.grad_accum)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        if cfg.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps {cfg.warmup_steps} must be < total steps {self.total_steps}")
        params = trainable_parameters(model)
        decay = [p for _, p in params if p.ndim >= 2]
        no_decay = [p for _, p in params if p.ndim < 2]
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": cfg.weight_decay},
             {"params": no_decay, "weight_decay": 0.0}],
            lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
        )
        self.params = [p for _, p in params]
        self.step = 0
        self.history: list[StepRecord] = []

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, epoch]))
        return rng.permutation(len(self.examples))

    def _groups(self, epoch: int) -> list[list[list[int]]]:
        order = self.epoch_order(epoch).tolist()
        mb = self.cfg.micro_batch
        micro = [order[i:i + mb] for i in range(0, len(order), mb)]
        acc = self.cfg.grad_accum
        return [micro[i:i + acc] for i in range(0, len(micro), acc)]

    def _micro_loss(self, idx: list[int]) -> torch.Tensor:
        preds, targets, masks = [], [], []
        for i in idx:
            ex = self.examples[i]
            seq = self.model.build_sequence(None, ex.prior, layout=ex.layout)
            preds.append(self.model(seq))
            targets.append(ex.target)
            masks.append(ex.mask)
        pred = torch.stack(preds)
        return masked_mse(pred, torch.stack(targets).to(pred.dtype), torch.stack(masks))

    def train_step(self) -> StepRecord:
        k = self.step
        epoch, g = divmod(k, self.steps_per_epoch)
        group = self._groups(epoch)[g]
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for idx in group:
            loss = self._micro_loss(idx)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(k, value)
            (loss / len(group)).backward()
            total += value
        grad_norm = float(torch.nn.utils.clip_grad_norm_(self.params, self.cfg.clip_norm))
        grads = [p.grad for p in self.params if p.grad is not None]
        clipped = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(x) for x in grads])))
        lr = lr_at(k, self.total_steps, self.cfg)
        for pg in self.optimizer.param_groups:
            pg["lr"] = lr
        self.optimizer.step()
        self.step += 1
        rec = StepRecord(k, lr, total / len(group), grad_norm, clipped)
        self.history.append(rec)
        if self.on_step is not None:
            self.on_step(rec)
        return rec

    def run(self, until_step: int | None = None) -> list[StepRecord]:
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        while self.step < stop:
            self.train_step()
        self.model.eval()
        return self.history

    def epoch_losses(self) -> list[float]:
        spe = self.steps_per_epoch
        return [
            float(np.mean([r.loss for r in self.history[e * spe:(e + 1) * spe]]))
            for e in range(-(-len(self.history) // spe))
        ]

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "optimizer": self.optimizer.state_dict(),
            "history": [asdict(r) for r in self.history],
            "cfg": asdict(self.cfg),
        }

    def load_state_dict(self, state: dict) -> None:
        if TrainConfig.from_dict(state["cfg"]) != self.cfg:
            raise CheckpointError("training config differs from the checkpointed run")
        opt = state["optimizer"]
        # the container stores tuples as JSON lists
        groups = [{**g, "betas": tuple(g["betas"])} for g in opt["param_groups"]]
        self.optimizer.load_state_dict({**opt, "param_groups": groups})
        self.step = int(state["step"])
        self.history = [StepRecord(**r) for r in state["history"]]


def train(model: GraderModel, sessions, cfg: TrainConfig | None = None,
          app: AppBundle | None = None) -> tuple[GraderModel, Trainer]:
    """Fine-tune ``model`` on whole sessions; returns the model and its trainer."""
    cfg = cfg or TrainConfig()
    trainer = Trainer(model, session_examples(model, sessions, app), cfg)
    trainer.run()
    return model, trainer


# -- checkpoint container -------------------------------------------------------


def save_checkpoint(path: Path | str, model: GraderModel, trainer: Trainer | None = None,
                    app: AppBundle | None = None, meta: dict | None = None) -> None:
    blob = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "model_config": model.cfg.to_dict(),
        "model": model.state_dict(),
        "trainer": trainer.state_dict() if trainer is not None else None,
        # data order is the only randomness in training: permutation(seed, epoch)
        "rng": {"data_order_seed": trainer.cfg.seed if trainer is not None else None,
                "next_step": trainer.step if trainer is not None else 0},
        "meta": meta or {},
        "app": None,
    }
    if app is not None:
        blob["app"] = {
            "version": APP_VERSION,
            "target": app.target,
            "dims": {"d_feat": app.encoder.d_feat, "d_w": app.encoder.d_w,
                     "encoder_seed": app.encoder.seed, "hidden": app.head.hidden,
                     "dropout": app.head.dropout},
            "encoder": app.encoder.state_dict(),
            "head": app.head.state_dict(),
        }
    write_container(blob, path)


@dataclass
class Checkpoint:
    model: GraderModel
    trainer_state: dict | None
    app: AppBundle | None
    meta: dict
    rng: dict


def load_checkpoint(path: Path | str, expect: ModelConfig | None = None) -> Checkpoint:
    """Load a grader checkpoint; ``expect`` pins dimensions (mismatch names the field)."""
    blob = _check_container(read_container(path), CKPT_FORMAT, CKPT_VERSION, path)
    cfg = ModelConfig.from_dict(blob["model_config"])
    if expect is not None:
        for f in fields(ModelConfig):
            got, want = getattr(cfg, f.name), getattr(expect, f.name)
            if got != want:
                raise CheckpointError(f"{path}: {f.name} mismatch (checkpoint {got}, expected {want})")
    model = GraderModel(cfg)
    try:
        model.load_state_dict(blob["model"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not fit config ({exc})") from None
    model.eval()
    app = None
    if blob.get("app") is not None:
        a = blob["app"]
        dims = a["dims"]
        enc = FrozenEncoder(dims["d_feat"], dims["d_w"], dims["encoder_seed"])
        enc.load_state_dict(a["encoder"])
        head = AppHead(dims["d_w"], dims["hidden"], dims["dropout"])
        head.load_state_dict(a["head"])
        head.requires_grad_(False)
        app = AppBundle(enc, head, a["target"])
    return Checkpoint(model, blob.get("trainer"), app, blob.get("meta", {}), blob.get("rng", {}))
