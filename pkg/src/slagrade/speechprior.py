"""Frozen speech-encoder surrogate and the acoustic proficiency prior branch.

Pipeline: frame features -> :class:`FrozenEncoder` (never trained) ->
:func:`mean_pool` -> :class:`AppHead` (two-layer MLP + softmax over the 8
score bands) -> :class:`PriorProjector` (one prefix embedding).

The head can also act as a grader on its own via :func:`app_expected_score`;
:class:`AppGrader` wires four per-part heads into the ensemble baseline.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Session
from .scale import PARTS, TARGETS, band_index, band_values

N_BANDS = 8
_BAND_VALUES = torch.tensor(band_values(), dtype=torch.float64)

APP_FORMAT = "slagrade-app"
APP_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(Exception):
    """Checkpoint container is unreadable, of the wrong kind, or mismatched."""


class FrozenEncoder(nn.Module):
    """Per-frame ``tanh(x W^T + b)`` with weights fixed by ``seed``.

    Weights live in buffers, so no optimizer can ever see them.
    """

    def __init__(self, d_feat: int = 16, d_w: int = 32, seed: int = 1234):
        super().__init__()
        self.d_feat, self.d_w, self.seed = d_feat, d_w, seed
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("weight", torch.randn(d_w, d_feat, generator=g) / math.sqrt(d_feat))
        self.register_buffer("bias", 0.1 * torch.randn(d_w, generator=g))

    @torch.no_grad()
    def forward(self, features) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(features) if not torch.is_tensor(features) else features)
        if x.ndim != 2 or x.shape[1] != self.d_feat:
            raise ValueError(f"expected (T, {self.d_feat}) features, got {tuple(x.shape)}")
        x = x.to(self.weight.dtype)
        return torch.tanh(x @ self.weight.T + self.bias)


def mean_pool(h: torch.Tensor) -> torch.Tensor:
    """Temporal (row-wise) mean of a ``(T, d)`` matrix."""
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError(f"mean_pool needs a non-empty (T, d) matrix, got {tuple(h.shape)}")
    return h.mean(dim=0)


class AppHead(nn.Module):
    """Linear(d_w, hidden) -> GELU -> Dropout -> Linear(hidden, 8) -> softmax."""

    def __init__(self, d_w: int = 32, hidden: int = 64, dropout: float = 0.1, seed: int = 0):
        super().__init__()
        self.d_w, self.hidden, self.dropout = d_w, hidden, dropout
        g = torch.Generator().manual_seed(seed)
        self.fc1 = nn.Linear(d_w, hidden)
        self.fc2 = nn.Linear(hidden, N_BANDS)
        with torch.no_grad():
            for lin in (self.fc1, self.fc2):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=g)
                lin.bias.uniform_(-bound, bound, generator=g)

    def logits(self, pooled: torch.Tensor, train_mode: bool = False,
               generator: torch.Generator | None = None) -> torch.Tensor:
        if pooled.shape[-1] != self.d_w:
            raise ValueError(f"pooled width {pooled.shape[-1]} != d_w {self.d_w}")
        z = F.gelu(self.fc1(pooled.to(self.fc1.weight.dtype)))
        if train_mode and self.dropout > 0:
            keep = torch.rand(z.shape, generator=generator, dtype=z.dtype) >= self.dropout
            z = z * keep / (1.0 - self.dropout)
        out = self.fc2(z)
        if not torch.isfinite(out).all():
            raise NonFiniteError("non-finite logits in APP head")
        return out

    def forward(self, pooled: torch.Tensor, train_mode: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.softmax(self.logits(pooled, train_mode, generator), dim=-1)


def app_forward(head: AppHead, pooled: torch.Tensor, train_mode: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
    return head(pooled, train_mode, generator)


def app_expected_score(probs) -> torch.Tensor | float:
    """Expected score under a band distribution (last axis holds the 8 bands)."""
    if torch.is_tensor(probs):
        return probs @ _BAND_VALUES.to(probs.dtype)
    p = np.asarray(probs, dtype=np.float64)
    out = p @ np.asarray(band_values())
    return float(out) if out.ndim == 0 else out


class PriorProjector(nn.Linear):
    """Affine map from the 8 band probabilities to one prefix embedding."""

    def __init__(self, d_model: int):
        super().__init__(N_BANDS, d_model)


# -- pooled inputs ----------------------------------------------------------


def response_vectors(encoder: FrozenEncoder, session: Session) -> list[torch.Tensor]:
    return [mean_pool(encoder(r.features)) for r in session.responses]


def session_vector(encoder: FrozenEncoder, session: Session) -> torch.Tensor:
    """Mean over the concatenation of every response's encoded frames."""
    return mean_pool(torch.cat([encoder(r.features) for r in session.responses], dim=0))


# -- standalone training ------------------------------------------------------


@dataclass(frozen=True)
class AppTrainConfig:
    epochs: int = 40
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    hidden: int = 64
    dropout: float = 0.1


@dataclass
class AppBundle:
    """Frozen encoder plus a trained prior head for one target."""

    encoder: FrozenEncoder
    head: AppHead
    target: str

    def prior(self, session: Session) -> torch.Tensor:
        """Session-level prior (eval mode) from all frames of the session."""
        with torch.no_grad():
            return self.head(session_vector(self.encoder, session))

    def predict_part(self, session: Session, part: str) -> float:
        """Average of per-response expected scores within ``part``."""
        vecs = [mean_pool(self.encoder(r.features)) for r in session.part_responses(part)]
        with torch.no_grad():
            scores = app_expected_score(self.head(torch.stack(vecs)).double())
        return math.fsum(scores.tolist()) / len(vecs)

    def predict_session(self, session: Session) -> float:
        with torch.no_grad():
            return float(app_expected_score(self.prior(session).double()))


def _training_samples(encoder: FrozenEncoder, sessions: Sequence[Session], target: str):
    k = TARGETS.index(target)
    xs, ys = [], []
    for s in sessions:
        if not s.mask[k]:
            continue
        y = band_index(s.labels.as_tuple()[k])
        if target == "overall":
            xs.append(session_vector(encoder, s))
            ys.append(y)
        else:
            for r in s.part_responses(PARTS[k]):
                xs.append(mean_pool(encoder(r.features)))
                ys.append(y)
    if not xs:
        raise ValueError(f"no labeled sessions for target {target!r}")
    return torch.stack(xs), torch.tensor(ys, dtype=torch.long)


def app_pretrain(
    sessions: Sequence[Session],
    target: str = "overall",
    epochs: int | None = None,
    seed: int = 0,
    cfg: AppTrainConfig | None = None,
    encoder: FrozenEncoder | None = None,
) -> AppBundle:
    """Train a prior head as an 8-way band classifier with the encoder frozen.

    ``target`` is ``"overall"`` (one sample per session, pooled over every
    frame) or a part name (one sample per response of that part).
    """
    cfg = cfg or AppTrainConfig()
    if epochs is not None:
        cfg = AppTrainConfig(**{**asdict(cfg), "epochs": epochs})
    target = target.lower()
    if target not in TARGETS:
        raise ValueError(f"unknown APP target {target!r}")
    if encoder is None:
        d_feat = sessions[0].responses[0].features.shape[1]
        encoder = FrozenEncoder(d_feat)
    x, y = _training_samples(encoder, sessions, target)
    head = AppHead(encoder.d_w, cfg.hidden, cfg.dropout, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=g)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = F.cross_entropy(head.logits(x[idx], train_mode=True, generator=g), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    head.requires_grad_(False)
    return AppBundle(encoder, head, target)


class AppGrader:
    """Ensemble of per-part prior heads; overall is the mean of part scores."""

    def __init__(self, bundles: dict[str, AppBundle]):
        missing = [p for p in PARTS if p.lower() not in bundles]
        if missing:
            raise ValueError(f"AppGrader needs a head per part, missing {missing}")
        self.bundles = bundles

    @classmethod
    def fit(cls, sessions: Sequence[Session], seed: int = 0, cfg: AppTrainConfig | None = None,
            encoder: FrozenEncoder | None = None) -> "AppGrader":
        if encoder is None:
            encoder = FrozenEncoder(sessions[0].responses[0].features.shape[1])
        return cls({
            p.lower(): app_pretrain(sessions, p.lower(), seed=seed + i, cfg=cfg, encoder=encoder)
            for i, p in enumerate(PARTS)
        })

    def predict(self, session: Session):
        from .backbone import Prediction

        parts = [self.bundles[p.lower()].predict_part(session, p) for p in PARTS]
        overall = (parts[0] + parts[1] + parts[2] + parts[3]) / 4.0
        return Prediction(*parts, ori_overall=overall, part_mean_overall=overall)


# -- checkpoint ---------------------------------------------------------------


def save_app_bundle(bundle: AppBundle, path: Path | str) -> None:
    write_container(
        {
            "format": APP_FORMAT,
            "version": APP_VERSION,
            "target": bundle.target,
            "dims": {
                "d_feat": bundle.encoder.d_feat,
                "d_w": bundle.encoder.d_w,
                "encoder_seed": bundle.encoder.seed,
                "hidden": bundle.head.hidden,
                "dropout": bundle.head.dropout,
            },
            "encoder": bundle.encoder.state_dict(),
            "head": bundle.head.state_dict(),
        },
        path,
    )


def _encode(obj, tensors: dict):
    if torch.is_tensor(obj):
        key = f"t{len(tensors)}"
        tensors[key] = obj.detach().clone().contiguous()
        return {"__tensor__": key}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: _encode(v, tensors) for k, v in obj.items()}
        return {"__items__": [[k, _encode(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, tensors) for v in obj]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise TypeError(f"cannot store {type(obj).__name__} in a checkpoint")


def _decode(obj, tensors: dict):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__items__" in obj:
            return {k: _decode(v, tensors) for k, v in obj["__items__"]}
        return {k: _decode(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, tensors) for v in obj]
    return obj


def write_container(obj: dict, path: Path | str) -> None:
    """Store nested dicts of tensors and plain values with canonical bytes.

    Everything except tensors goes into one JSON string, so equal content
    always pickles identically regardless of Python object sharing.
    """
    tensors: dict[str, torch.Tensor] = {}
    header = json.dumps(_encode(obj, tensors), allow_nan=True)
    buf = io.BytesIO()
    torch.save({"header": header, "tensors": tensors}, buf)
    Path(path).write_bytes(buf.getvalue())


def read_container(path: Path | str) -> dict:
    try:
        raw = torch.load(path, weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a zoo of types for bad archives
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(raw, dict) or set(raw) != {"header", "tensors"}:
        raise CheckpointError(f"{path}: not a checkpoint container")
    try:
        return _decode(json.loads(raw["header"]), raw["tensors"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None


def _check_container(blob: object, fmt: str, version: int, path) -> dict:
    if not isinstance(blob, dict) or blob.get("format") != fmt:
        raise CheckpointError(f"{path}: not a {fmt} checkpoint")
    if blob.get("version") != version:
        raise CheckpointError(f"{path}: version {blob.get('version')} unsupported (want {version})")
    return blob


def load_app_bundle(path: Path | str, expect_d_feat: int | None = None) -> AppBundle:
    blob = _check_container(read_container(path), APP_FORMAT, APP_VERSION, path)
    dims = blob["dims"]
    if expect_d_feat is not None and dims["d_feat"] != expect_d_feat:
        raise CheckpointError(f"{path}: d_feat {dims['d_feat']} != expected {expect_d_feat}")
    encoder = FrozenEncoder(dims["d_feat"], dims["d_w"], dims["encoder_seed"])
    encoder.load_state_dict(blob["encoder"])
    head = AppHead(dims["d_w"], dims["hidden"], dims["dropout"])
    head.load_state_dict(blob["head"])
    head.requires_grad_(False)
    return AppBundle(encoder, head, blob["target"])
