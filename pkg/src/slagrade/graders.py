"""Prediction sources behind one interface: ``predict(session) -> Prediction``.

* :class:`SessionGrader` -- the unified session-level model (with or without
  the acoustic prior prefix).
* :class:`CtgGrader` -- one response-level grader trained on responses pooled
  from every part; part score = mean of its responses' scores.
* :class:`StgGrader` -- four independent response-level graders, one per part.

Response-level graders reuse :class:`GraderModel` on a single-response
sequence and read their score from the overall output slot.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Sequence

import torch

from .backbone import (
    KIND_AUDIO,
    KIND_END,
    KIND_TEXT,
    NO_PART,
    GraderModel,
    ModelConfig,
    Prediction,
    SessionLayout,
    strided_mean,
    tokenize,
)
from .corpus import INSTRUCTIONS, Response, Session
from .scale import PARTS
from .speechprior import AppBundle
from .train import Example, TrainConfig, Trainer, session_examples

RESPONSE_SLOT = 4


class SessionGrader:
    def __init__(self, model: GraderModel, app: AppBundle | None = None, tag: str | None = None):
        if model.cfg.use_prior and app is None:
            raise ValueError("model uses a prior prefix; pass the APP bundle")
        self.model, self.app = model, app
        self.tag = tag or ("mtl_app" if model.cfg.use_prior else "mtl")

    def predict(self, session: Session) -> Prediction:
        prior = self.app.prior(session) if self.model.cfg.use_prior else None
        return self.model.predict(self.model.build_sequence(session, prior))


def response_layout(model: GraderModel, session: Session, response: Response) -> SessionLayout:
    """Single-response sequence: part instruction, prompt, audio frames, end marker."""
    cfg = model.cfg
    p = PARTS.index(response.part)
    instr = tokenize(INSTRUCTIONS[response.part], cfg.vocab_size)
    prompt = tokenize(response.prompt_text, cfg.vocab_size)
    frames = strided_mean(model.encoder(response.features), cfg.audio_stride)
    n_text, n_audio = len(instr) + len(prompt), frames.shape[0]
    kinds = [KIND_TEXT] * n_text + [KIND_AUDIO] * n_audio + [KIND_END]
    parts = [p] * (n_text + n_audio) + [NO_PART]
    resp = [-1] * len(instr) + [response.index_in_part] * (len(prompt) + n_audio) + [-1]
    toks = instr + prompt + [-1] * n_audio + [0]
    as_long = lambda v: torch.tensor(v, dtype=torch.long)  # noqa: E731
    return SessionLayout(
        f"{session.session_id}/{response.part}.{response.index_in_part}",
        as_long(kinds), as_long(parts), as_long(resp), as_long(toks), frames,
        [(n_text, n_text + n_audio)], False,
    )


def response_examples(model: GraderModel, sessions: Sequence[Session],
                      parts: Sequence[str] = PARTS) -> list[Example]:
    out = []
    for s in sessions:
        for r in s.responses:
            k = PARTS.index(r.part)
            if r.part not in parts or not s.mask[k]:
                continue
            target = torch.zeros(5, dtype=torch.float64)
            target[RESPONSE_SLOT] = s.labels.parts()[k]
            mask = torch.zeros(5, dtype=torch.bool)
            mask[RESPONSE_SLOT] = True
            out.append(Example(response_layout(model, s, r), None, target, mask))
    if not out:
        raise ValueError(f"no labeled responses for parts {list(parts)}")
    return out


def response_score(model: GraderModel, session: Session, response: Response) -> float:
    seq = model.build_sequence(session, None, layout=response_layout(model, session, response))
    with torch.no_grad():
        return float(model(seq)[RESPONSE_SLOT].double())


def _part_score(model: GraderModel, session: Session, part: str) -> float:
    scores = [response_score(model, session, r) for r in session.part_responses(part)]
    return math.fsum(scores) / len(scores)  # exactly rounded, so response order cannot matter


def _parts_prediction(parts: list[float]) -> Prediction:
    overall = (parts[0] + parts[1] + parts[2] + parts[3]) / 4.0
    return Prediction(*parts, ori_overall=overall, part_mean_overall=overall)


def response_model_config(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, use_prior=False)


class CtgGrader:
    tag = "ctg"

    def __init__(self, model: GraderModel):
        self.model = model

    @classmethod
    def fit(cls, sessions: Sequence[Session], model_cfg: ModelConfig | None = None,
            train_cfg: TrainConfig | None = None) -> tuple["CtgGrader", Trainer]:
        model = GraderModel(response_model_config(model_cfg or ModelConfig()))
        trainer = Trainer(model, response_examples(model, sessions), train_cfg or TrainConfig())
        trainer.run()
        return cls(model), trainer

    def predict(self, session: Session) -> Prediction:
        return _parts_prediction([_part_score(self.model, session, p) for p in PARTS])


class StgGrader:
    tag = "stg"

    def __init__(self, models: dict[str, GraderModel]):
        if set(models) != set(PARTS):
            raise ValueError(f"need one grader per part {PARTS}, got {sorted(models)}")
        self.models = models

    @classmethod
    def fit(cls, sessions: Sequence[Session], model_cfg: ModelConfig | None = None,
            train_cfg: TrainConfig | None = None) -> tuple["StgGrader", dict[str, Trainer]]:
        cfg = response_model_config(model_cfg or ModelConfig())
        models, trainers = {}, {}
        for part in PARTS:
            model = GraderModel(cfg)
            trainers[part] = Trainer(model, response_examples(model, sessions, parts=(part,)),
                                     train_cfg or TrainConfig())
            trainers[part].run()
            models[part] = model
        return cls(models), trainers

    def predict(self, session: Session) -> Prediction:
        return _parts_prediction([_part_score(self.models[p], session, p) for p in PARTS])


def fit_session_grader(sessions: Sequence[Session], model_cfg: ModelConfig | None = None,
                       train_cfg: TrainConfig | None = None,
                       app: AppBundle | None = None) -> tuple[SessionGrader, Trainer]:
    model = GraderModel(model_cfg or ModelConfig())
    trainer = Trainer(model, session_examples(model, sessions, app), train_cfg or TrainConfig())
    trainer.run()
    return SessionGrader(model, app), trainer
