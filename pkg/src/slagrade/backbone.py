"""Session-level grader: frozen tiny transformer, LoRA adapters, prior prefix, 5-way head.

A session becomes one interleaved sequence::

    [prior] (instruction tokens, (prompt tokens, audio frames) * n_resp) * 4 parts, [end]

and the hidden state at the trailing end marker is mapped to
``(p1, p3, p4, p5, overall)`` by a single linear layer.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import re
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import INSTRUCTIONS, Session
from .scale import PARTS, SCALE_CENTER
from .speechprior import N_BANDS, FrozenEncoder, NonFiniteError, PriorProjector

KIND_PRIOR, KIND_TEXT, KIND_AUDIO, KIND_END = range(4)
KIND_NAMES = ("prior_prefix", "text_token", "audio_frame", "end_marker")
NO_PART = len(PARTS)
MAX_RESPONSES = 8

DEFAULT_LORA_TARGETS = ("q_proj", "k_proj", "v_proj", "o_proj", "fc_in", "fc_out")


class ContextOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 16
    d_w: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = DEFAULT_LORA_TARGETS
    vocab_size: int = 1024
    max_context: int = 4096
    audio_stride: int = 8
    causal: bool = False
    use_prior: bool = True
    head_bias_init: float = SCALE_CENTER
    readout_gain: float = 4.0
    embed_std: float = 0.02
    base_seed: int = 0
    encoder_seed: int = 1234
    adapter_seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.audio_stride < 1:
            raise ValueError("audio_stride must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- text -------------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Hash whitespace/punctuation tokens into ids ``1..vocab_size-1`` (0 is the end marker)."""
    ids = []
    for w in _WORD.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(w.encode(), digest_size=8).digest(), "little")
        ids.append(1 + h % (vocab_size - 1))
    return ids


# -- layers -------------------------------------------------------------------


class LoRALinear(nn.Module):
    """``base(x) + (alpha / r) * B(A(x))`` with ``B`` zero-initialized."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, generator: torch.Generator | None = None):
        super().__init__()
        self.base = base
        self.r, self.alpha = r, alpha
        self.scale = alpha / r
        self.enabled = True
        base.requires_grad_(False)
        bound = 1.0 / math.sqrt(base.in_features)
        a = torch.empty(r, base.in_features, dtype=base.weight.dtype).uniform_(-bound, bound, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r, dtype=base.weight.dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if self.enabled:
            out = out + self.scale * ((x @ self.lora_A.T) @ self.lora_B.T)
        return out


def _init_linear(lin: nn.Linear, g: torch.Generator, std: float | None = None) -> nn.Linear:
    with torch.no_grad():
        lin.weight.normal_(0.0, std or 1.0 / math.sqrt(lin.in_features), generator=g)
        if lin.bias is not None:
            lin.bias.zero_()
    return lin


class Block(nn.Module):
    """Pre-norm transformer block with named projections for adapter injection."""

    def __init__(self, cfg: ModelConfig, g: torch.Generator):
        super().__init__()
        d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
        self.n_heads, self.causal = cfg.n_heads, cfg.causal
        self.ln1 = nn.LayerNorm(d)
        self.q_proj = _init_linear(nn.Linear(d, d), g)
        self.k_proj = _init_linear(nn.Linear(d, d), g)
        self.v_proj = _init_linear(nn.Linear(d, d), g)
        self.o_proj = _init_linear(nn.Linear(d, d), g, std=1.0 / math.sqrt(d * 2 * cfg.n_layers))
        self.ln2 = nn.LayerNorm(d)
        self.fc_in = _init_linear(nn.Linear(d, hid), g)
        self.fc_out = _init_linear(nn.Linear(hid, d), g, std=1.0 / math.sqrt(hid * 2 * cfg.n_layers))

    def attention(self, x: torch.Tensor, key_mask: torch.Tensor | None) -> torch.Tensor:
        t, d = x.shape[-2:]
        hd = d // self.n_heads

        def split(z):
            return z.view(*z.shape[:-1], self.n_heads, hd).transpose(-3, -2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        if self.causal:
            future = torch.ones(t, t, dtype=torch.bool).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.o_proj(ctx.transpose(-3, -2).reshape(*x.shape[:-1], d))

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attention(self.ln1(x), key_mask)
        return x + self.fc_out(F.gelu(self.fc_in(self.ln2(x))))


def _sinusoid(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    ang = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang)
    return pe.float()


# -- sequence -------------------------------------------------------------------


@dataclass
class SessionLayout:
    """Frozen, weight-independent part of a session sequence."""

    session_id: str
    kinds: torch.Tensor
    parts: torch.Tensor
    response_index: torch.Tensor
    token_ids: torch.Tensor
    audio: torch.Tensor
    audio_spans: list[tuple[int, int]]
    has_prior: bool

    def __len__(self) -> int:
        return int(self.kinds.shape[0])


@dataclass
class SequenceItem:
    kind: str
    embedding: torch.Tensor
    part: str | None
    response_index: int | None


@dataclass
class SessionSequence:
    layout: SessionLayout
    embeddings: torch.Tensor
    attention_mask: torch.Tensor

    def __len__(self) -> int:
        return len(self.layout)

    @property
    def items(self) -> list[SequenceItem]:
        lay = self.layout
        out = []
        for i in range(len(lay)):
            p, r = int(lay.parts[i]), int(lay.response_index[i])
            out.append(SequenceItem(
                KIND_NAMES[int(lay.kinds[i])],
                self.embeddings[i],
                PARTS[p] if p != NO_PART else None,
                r if r >= 0 else None,
            ))
        return out


@dataclass(frozen=True)
class Prediction:
    p1: float
    p3: float
    p4: float
    p5: float
    ori_overall: float
    part_mean_overall: float = field(default=math.nan)

    @classmethod
    def from_heads(cls, heads: Sequence[float]) -> "Prediction":
        p1, p3, p4, p5, ori = (float(v) for v in heads)
        return cls(p1, p3, p4, p5, ori, (p1 + p3 + p4 + p5) / 4.0)

    def parts(self) -> tuple[float, float, float, float]:
        return (self.p1, self.p3, self.p4, self.p5)

    def overall(self, mode: str) -> float:
        return self.part_mean_overall if mode == "part_mean" else self.ori_overall


def strided_mean(h: torch.Tensor, stride: int) -> torch.Tensor:
    """Average non-overlapping windows of ``stride`` rows (last window may be short)."""
    if stride == 1:
        return h
    t = h.shape[0]
    n = -(-t // stride)
    pad = n * stride - t
    sums = F.pad(h, (0, 0, 0, pad)).view(n, stride, -1).sum(dim=1)
    counts = torch.full((n, 1), float(stride), dtype=h.dtype)
    counts[-1, 0] = stride - pad
    return sums / counts


# -- model ------------------------------------------------------------------------


class GraderModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.base_seed)
        d = cfg.d_model

        self.encoder = FrozenEncoder(cfg.d_feat, cfg.d_w, cfg.encoder_seed)
        self.token_embedder = nn.Embedding(cfg.vocab_size, d)
        self.kind_embedder = nn.Embedding(len(KIND_NAMES), d)
        self.part_embedder = nn.Embedding(len(PARTS) + 1, d)
        self.response_embedder = nn.Embedding(MAX_RESPONSES + 1, d)
        with torch.no_grad():
            for emb in (self.token_embedder, self.kind_embedder, self.part_embedder, self.response_embedder):
                emb.weight.normal_(0.0, cfg.embed_std, generator=g)
        self.register_buffer("positions", cfg.embed_std * _sinusoid(cfg.max_context, d), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg, g) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(d)
        with torch.no_grad():
            self.final_norm.weight.fill_(cfg.readout_gain)
        self.requires_grad_(False)

        ga = torch.Generator().manual_seed(cfg.adapter_seed)
        self.audio_adapter = _init_linear(nn.Linear(cfg.d_w, d), ga)
        self.prior_projector = PriorProjector(d) if cfg.use_prior else None
        if self.prior_projector is not None:
            _init_linear(self.prior_projector, ga)
        self.head = nn.Linear(d, 5)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.fill_(cfg.head_bias_init)
        lora_wrap(self, cfg.lora_rank, cfg.lora_alpha, cfg.lora_targets, generator=ga)

    # sequence construction

    def layout(self, session: Session, with_prior: bool | None = None) -> SessionLayout:
        """Token ids, encoded (strided) audio and bookkeeping for ``session``."""
        cfg = self.cfg
        with_prior = cfg.use_prior if with_prior is None else with_prior
        kinds, parts, resp, toks = [], [], [], []
        audio, spans = [], []

        def push(kind, part, r, tok=-1):
            kinds.append(kind)
            parts.append(part)
            resp.append(r)
            toks.append(tok)

        if with_prior:
            push(KIND_PRIOR, NO_PART, -1)
        n_audio = 0
        for p_idx, part in enumerate(PARTS):
            for tok in tokenize(INSTRUCTIONS[part], cfg.vocab_size):
                push(KIND_TEXT, p_idx, -1, tok)
            for r in session.part_responses(part):
                for tok in tokenize(r.prompt_text, cfg.vocab_size):
                    push(KIND_TEXT, p_idx, r.index_in_part, tok)
                frames = strided_mean(self.encoder(r.features), cfg.audio_stride)
                start = len(kinds)
                for _ in range(frames.shape[0]):
                    push(KIND_AUDIO, p_idx, r.index_in_part)
                spans.append((start, len(kinds)))
                audio.append(frames)
                n_audio += frames.shape[0]
        push(KIND_END, NO_PART, -1, 0)
        if len(kinds) > cfg.max_context:
            raise ContextOverflowError(
                f"session {session.session_id}: {len(kinds)} items exceed max context {cfg.max_context}"
            )
        as_long = lambda v: torch.tensor(v, dtype=torch.long)  # noqa: E731
        return SessionLayout(
            session.session_id, as_long(kinds), as_long(parts), as_long(resp), as_long(toks),
            torch.cat(audio, dim=0), spans, with_prior,
        )

    def embed(self, layout: SessionLayout, prior: torch.Tensor | None = None) -> torch.Tensor:
        """Item embeddings; ``prior`` is the 8-way band distribution (projected here)."""
        d = self.cfg.d_model
        dtype = self.head.weight.dtype
        n = len(layout)
        x = torch.zeros(n, d, dtype=dtype)
        text = layout.kinds == KIND_TEXT
        end = layout.kinds == KIND_END
        audio = layout.kinds == KIND_AUDIO
        x = x.index_put((text.nonzero().squeeze(1),), self.token_embedder(layout.token_ids[text]))
        x = x.index_put((end.nonzero().squeeze(1),), self.token_embedder(layout.token_ids[end]))
        x = x.index_put((audio.nonzero().squeeze(1),), self.audio_adapter(layout.audio.to(dtype)))
        if layout.has_prior:
            if prior is None:
                raise ValueError("layout has a prior slot but no prior was given")
            if self.prior_projector is None:
                raise ValueError("model was built without a prior projector")
            x = x.index_put((torch.tensor([0]),), self.prior_projector(prior.to(dtype))[None])
        x = x + self.kind_embedder(layout.kinds) + self.part_embedder(layout.parts)
        x = x + self.response_embedder(layout.response_index + 1) + self.positions[:n].to(dtype)
        return x

    def build_sequence(self, session: Session, prior: torch.Tensor | None = None,
                       layout: SessionLayout | None = None) -> SessionSequence:
        layout = layout or self.layout(session, with_prior=prior is not None)
        emb = self.embed(layout, prior)
        return SessionSequence(layout, emb, torch.ones(len(layout), dtype=torch.bool))

    # forward

    def hidden_states(self, seq: SessionSequence) -> torch.Tensor:
        x = seq.embeddings
        mask = seq.attention_mask
        if bool(mask.all()):
            mask = None
        for block in self.blocks:
            x = block(x, mask)
        return self.final_norm(x)

    def forward(self, seq: SessionSequence) -> torch.Tensor:
        h_t = self.hidden_states(seq)[-1]
        out = self.head(h_t)
        if not torch.isfinite(out).all():
            raise NonFiniteError(f"non-finite output for session {seq.layout.session_id}")
        return out

    def predict(self, seq: SessionSequence) -> Prediction:
        with torch.no_grad():
            return Prediction.from_heads(self(seq).double().tolist())


def build_session_sequence(model: GraderModel, session: Session,
                           prior: torch.Tensor | None = None) -> SessionSequence:
    return model.build_sequence(session, prior)


def forward(model: GraderModel, seq: SessionSequence) -> Prediction:
    return model.predict(seq)


# -- adapters -------------------------------------------------------------------


def lora_wrap(model: nn.Module, r: int, alpha: float, targets: Sequence[str],
              generator: torch.Generator | None = None) -> list[LoRALinear]:
    """Replace each named projection in every block by a LoRA-wrapped copy."""
    if r < 1:
        raise ValueError("rank must be >= 1")
    blocks = [m for m in model.modules() if isinstance(m, Block)]
    for name in targets:
        if not blocks or not all(isinstance(getattr(b, name, None), (nn.Linear, LoRALinear)) for b in blocks):
            raise ValueError(f"unknown adapter target {name!r}")
    wrapped = []
    for b in blocks:
        for name in targets:
            lin = getattr(b, name)
            if isinstance(lin, LoRALinear):
                lin = lin.base
            w = LoRALinear(lin, r, alpha, generator)
            setattr(b, name, w)
            wrapped.append(w)
    return wrapped


def adapters(model: nn.Module) -> list[LoRALinear]:
    return [m for m in model.modules() if isinstance(m, LoRALinear)]


@contextlib.contextmanager
def adapters_disabled(model: nn.Module) -> Iterator[None]:
    """Run the frozen base alone (adapter branches switched off)."""
    wrapped = adapters(model)
    saved = [w.enabled for w in wrapped]
    for w in wrapped:
        w.enabled = False
    try:
        yield
    finally:
        for w, s in zip(wrapped, saved):
            w.enabled = s


def trainable_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def frozen_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Copies of every tensor that must never change during training."""
    train_names = {n for n, _ in trainable_parameters(model)}
    return {k: v.detach().clone() for k, v in model.state_dict().items() if k not in train_names}


def parameter_count(cfg: ModelConfig) -> dict[str, int]:
    """Trainable-parameter count by formula (checked against the built model in tests)."""
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = {"q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
              "fc_in": (d, hid), "fc_out": (hid, d)}
    lora = cfg.n_layers * sum(cfg.lora_rank * sum(shapes[t]) for t in cfg.lora_targets)
    counts = {
        "adapters": lora,
        "head": 5 * d + 5,
        "audio_adapter": cfg.d_w * d + d,
        "prior_projector": (N_BANDS * d + d) if cfg.use_prior else 0,
    }
    counts["total"] = sum(counts.values())
    return counts


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
