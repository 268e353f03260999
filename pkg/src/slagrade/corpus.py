"""Session data model, synthetic corpus generator and on-disk format.

The generator is a stand-in for a gated speaking-test corpus. Each session
has a latent proficiency ``theta`` drawn uniformly over the score scale. Part
labels are ``theta`` plus rater noise, quantized to the 0.5 grid. For the
multi-response parts (P1, P5) the label is also lowered by the spread of the
per-response delivery levels inside the part, something only a grader that
sees every response of the part at once can measure.

Frame features carry the proficiency in two places:

* channel ``delivery_channel`` has mean ``mu = (theta - 2) / 3.5`` shifted by
  a per-response offset, and channel ``pause_channel`` mirrors it as ``1 - mu``;
* response length: stronger speakers fill more of each prompt's time limit.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln, ndtr

from .scale import PARTS, SCALE_MAX, SCALE_MIN, TARGETS, band_values, overall_from_parts, part_index, quantize

MAGIC = b"SGF1"
_HEADER = struct.Struct("<4sII")
MANIFEST = "manifest.jsonl"
FEATURE_DIR = "features"

# (time limit in seconds, prompt) per scored response; P1 drops the two
# unmarked warm-up questions, leaving six.
PROMPTS: dict[str, tuple[tuple[float, str], ...]] = {
    "P1": (
        (10.0, "Where do you live?"),
        (10.0, "What do you do in your free time?"),
        (20.0, "Tell me about a place you like to visit."),
        (20.0, "What kind of food do you enjoy and why?"),
        (20.0, "Describe a person who has helped you."),
        (20.0, "What would you like to learn in the future?"),
    ),
    "P3": ((60.0, "Some people think working from home is better. What do you think?"),),
    "P4": ((60.0, "Look at the graphic and describe how recycled paper is made."),),
    "P5": (
        (20.0, "Should cities ban cars from the centre?"),
        (20.0, "How do people in your country travel to work?"),
        (20.0, "Is public transport good where you live?"),
        (20.0, "Would you like to cycle more often?"),
        (20.0, "How will travel change in the future?"),
    ),
}

INSTRUCTIONS: dict[str, str] = {
    "P1": "Part one interview. Answer the questions about yourself.",
    "P3": "Part three long turn. Give your opinion for one minute.",
    "P4": "Part four long turn. Describe the process in the graphic.",
    "P5": "Part five communication activity. Answer the questions on the topic.",
}

RESPONSES_PER_PART = {p: len(v) for p, v in PROMPTS.items()}
MULTI_RESPONSE_PARTS = ("P1", "P5")


class CorpusError(Exception):
    """Base class for corpus read/write failures."""


class ManifestParseError(CorpusError):
    def __init__(self, path: Path | str, line: int, reason: str):
        self.path, self.line, self.reason = str(path), line, reason
        super().__init__(f"{path}:{line}: {reason}")


class FeatureHeaderError(CorpusError):
    """Feature blob does not start with a valid header."""


class FeatureLengthError(CorpusError):
    """Feature blob body length disagrees with its header."""


class DimensionMismatchError(CorpusError):
    """Feature blob dimensions disagree with the manifest or corpus."""


class MissingFileError(CorpusError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class ScoreVector:
    p1: float
    p3: float
    p4: float
    p5: float
    overall: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.p1, self.p3, self.p4, self.p5, self.overall)

    def parts(self) -> tuple[float, float, float, float]:
        return (self.p1, self.p3, self.p4, self.p5)


FULL_MASK = (True,) * 5


@dataclass(eq=False)
class Response:
    part: str
    index_in_part: int
    prompt_text: str
    features: np.ndarray
    duration_s: float

    @property
    def t_frames(self) -> int:
        return int(self.features.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Response):
            return NotImplemented
        return (
            self.part == other.part
            and self.index_in_part == other.index_in_part
            and self.prompt_text == other.prompt_text
            and self.duration_s == other.duration_s
            and self.features.dtype == other.features.dtype
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


@dataclass
class Session:
    session_id: str
    responses: list[Response]
    labels: ScoreVector
    mask: tuple[bool, ...] = FULL_MASK

    def part_responses(self, part: str) -> list[Response]:
        return [r for r in self.responses if r.part == part]

    def validate(self) -> None:
        counts = {p: 0 for p in PARTS}
        order = []
        d_feat = None
        for r in self.responses:
            if r.part not in counts:
                raise ValueError(f"{self.session_id}: unknown part {r.part!r}")
            counts[r.part] += 1
            order.append((part_index(r.part), r.index_in_part))
            if r.features.ndim != 2 or r.features.shape[0] < 1:
                raise ValueError(f"{self.session_id}: response needs at least one frame")
            if d_feat is None:
                d_feat = r.features.shape[1]
            elif r.features.shape[1] != d_feat:
                raise ValueError(f"{self.session_id}: inconsistent feature width")
        if counts != RESPONSES_PER_PART:
            raise ValueError(f"{self.session_id}: response counts {counts} != {RESPONSES_PER_PART}")
        if order != sorted(order):
            raise ValueError(f"{self.session_id}: responses out of canonical order")
        if len(self.mask) != 5 or not any(self.mask):
            raise ValueError(f"{self.session_id}: mask needs 5 entries with at least one set")


@dataclass(frozen=True)
class GenConfig:
    d_feat: int = 16
    frame_period_s: float = 0.2
    part_noise_sd: float = 0.25
    # cross-response spread of delivery levels is drawn from U[0, ratio * part_noise_sd]
    inconsistency_ratio: float = 1.6
    # score penalty per unit of within-part spread (in score units) on P1/P5
    consistency_weight: float = 1.0
    frame_noise_sd: float = 0.5
    delivery_channel: int = 0
    pause_channel: int = 1

    def validate(self) -> None:
        if self.d_feat < 2:
            raise ValueError("d_feat must be >= 2 (delivery and pause channels)")
        for name in ("delivery_channel", "pause_channel"):
            ch = getattr(self, name)
            if not 0 <= ch < self.d_feat:
                raise ValueError(f"{name}={ch} outside [0, {self.d_feat})")
        if self.delivery_channel == self.pause_channel:
            raise ValueError("delivery_channel and pause_channel must differ")
        if self.frame_period_s <= 0:
            raise ValueError("frame_period_s must be positive")
        for name in ("part_noise_sd", "inconsistency_ratio", "consistency_weight", "frame_noise_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _session_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def expected_spread_std(n: int, cfg: GenConfig) -> float:
    """E[np.std(levels)] for ``n`` responses: E[spread] times E[std of n unit normals]."""
    if n < 2:
        return 0.0
    c_n = math.sqrt(2.0 / n) * math.exp(gammaln(n / 2.0) - gammaln((n - 1) / 2.0))
    return 0.5 * cfg.inconsistency_ratio * cfg.part_noise_sd * c_n


def _generate_session(session_id: str, rng: np.random.Generator, cfg: GenConfig) -> Session:
    theta = rng.uniform(SCALE_MIN, SCALE_MAX)
    mu = (theta - SCALE_MIN) / (SCALE_MAX - SCALE_MIN)
    spread = rng.uniform(0.0, cfg.inconsistency_ratio * cfg.part_noise_sd)

    responses: list[Response] = []
    levels: dict[str, list[float]] = {}
    for part in PARTS:
        levels[part] = []
        for idx, (limit, prompt) in enumerate(PROMPTS[part]):
            level = mu + spread * rng.standard_normal()
            fill = float(np.clip(0.35 + 0.55 * mu + 0.08 * rng.standard_normal(), 0.2, 1.0))
            t = max(1, int(round(fill * limit / cfg.frame_period_s)))
            feats = rng.standard_normal((t, cfg.d_feat))
            feats[:, cfg.delivery_channel] = level + cfg.frame_noise_sd * rng.standard_normal(t)
            feats[:, cfg.pause_channel] = 1.0 - level + cfg.frame_noise_sd * rng.standard_normal(t)
            responses.append(
                Response(part, idx, prompt, feats.astype(np.float32), t * cfg.frame_period_s)
            )
            levels[part].append(level)

    part_scores = []
    for part in PARTS:
        raw = theta + cfg.part_noise_sd * rng.standard_normal()
        if part in MULTI_RESPONSE_PARTS:
            # centred so the penalty shifts no label mean
            excess = float(np.std(levels[part])) - expected_spread_std(len(levels[part]), cfg)
            raw -= cfg.consistency_weight * (SCALE_MAX - SCALE_MIN) * excess
        part_scores.append(quantize(raw))
    labels = ScoreVector(*part_scores, overall_from_parts(part_scores))
    return Session(session_id, responses, labels, FULL_MASK)


def generate_corpus(
    n_sessions: int, seed: int, cfg: GenConfig | None = None, id_prefix: str = "s"
) -> list[Session]:
    """Draw ``n_sessions`` synthetic sessions; output depends only on the arguments.

    Session ``i`` uses its own stream seeded by ``(seed, i)``, so a larger
    corpus extends a smaller one with the same seed.
    """
    cfg = cfg or GenConfig()
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    cfg.validate()
    return [
        _generate_session(f"{id_prefix}{i:05d}", _session_rng(seed, i), cfg)
        for i in range(n_sessions)
    ]


def apply_label_dropout(sessions: Sequence[Session], p_drop: float, seed: int) -> list[Session]:
    """Hide part labels at random; the overall label is hidden with any part.

    Masks where every bit would be dropped are redrawn.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must be in [0, 1), got {p_drop}")
    rng = np.random.default_rng(seed)
    out = []
    for s in sessions:
        while True:
            keep = rng.random(4) >= p_drop
            mask = (*map(bool, keep), bool(keep.all()))
            if any(mask):
                break
        out.append(replace(s, mask=mask))
    return out


def noise_floor(cfg: GenConfig | None = None, n_grid: int = 20001) -> dict[str, float]:
    """RMSE of the best predictor that knows the latent proficiency exactly.

    A part label is ``Q(x + e)`` with ``e ~ N(0, sd)`` and ``Q`` the clamped
    nearest-band map, so its conditional variance follows from the normal CDF
    mass of each band cell. The variance is averaged over ``theta`` with the
    midpoint rule. Overall labels average four independent part labels.
    """
    cfg = cfg or GenConfig()
    sd = cfg.part_noise_sd
    if sd == 0:
        return {t: 0.0 for t in TARGETS}
    bands = np.asarray(band_values())
    edges = np.concatenate(([-np.inf], (bands[:-1] + bands[1:]) / 2, [np.inf]))
    h = (SCALE_MAX - SCALE_MIN) / n_grid
    theta = SCALE_MIN + h * (np.arange(n_grid) + 0.5)
    cdf = ndtr((edges[None, :] - theta[:, None]) / sd)
    probs = np.diff(cdf, axis=1)
    mean = probs @ bands
    var = probs @ bands**2 - mean**2
    part_var = float(var.mean())
    floor = {t: math.sqrt(part_var) for t in TARGETS[:4]}
    floor["overall"] = math.sqrt(part_var / 4.0)
    return floor


# -- on-disk format ---------------------------------------------------------


def write_features(path: Path | str, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise DimensionMismatchError(f"features must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_features(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"feature blob not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureHeaderError(f"{path}: truncated header ({len(data)} bytes)")
    magic, t, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FeatureHeaderError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expected = _HEADER.size + 4 * t * d
    if len(data) != expected:
        raise FeatureLengthError(f"{path}: {len(data)} bytes, header implies {expected}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(t, d)
    return body.astype(np.float32)


def _feature_name(session_id: str, r: Response) -> str:
    return f"{FEATURE_DIR}/{session_id}_{r.part}_{r.index_in_part}.sgf"


def _manifest_record(s: Session) -> dict:
    return {
        "session_id": s.session_id,
        "labels": dict(zip(TARGETS, s.labels.as_tuple())),
        "mask": list(s.mask),
        "responses": [
            {
                "part": r.part,
                "index": r.index_in_part,
                "prompt": r.prompt_text,
                "feature_file": _feature_name(s.session_id, r),
                "t_frames": r.t_frames,
                "d_feat": int(r.features.shape[1]),
                "duration_s": r.duration_s,
            }
            for r in s.responses
        ],
    }


def write_corpus(sessions: Iterable[Session], dir_path: Path | str) -> Path:
    root = Path(dir_path)
    (root / FEATURE_DIR).mkdir(parents=True, exist_ok=True)
    lines = []
    for s in sessions:
        for r in s.responses:
            write_features(root / _feature_name(s.session_id, r), r.features)
        lines.append(json.dumps(_manifest_record(s), ensure_ascii=False))
    manifest = root / MANIFEST
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")
    return manifest


def _parse_record(rec: object) -> tuple[str, ScoreVector, tuple[bool, ...], list[dict]]:
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    sid = rec["session_id"]
    labels = rec["labels"]
    sv = ScoreVector(*(float(labels[t]) for t in TARGETS))
    mask = rec["mask"]
    if len(mask) != 5 or not all(isinstance(m, bool) for m in mask):
        raise ValueError("mask must hold 5 booleans")
    resps = rec["responses"]
    for r in resps:
        part_index(r["part"])
    return str(sid), sv, tuple(mask), resps


def read_corpus(dir_path: Path | str) -> list[Session]:
    root = Path(dir_path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise MissingFileError(f"manifest not found: {manifest}")
    sessions = []
    d_corpus = None
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sid, labels, mask, resps = _parse_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestParseError(manifest, lineno, str(exc)) from None
            responses = []
            for r in resps:
                feats = read_features(root / r["feature_file"])
                if feats.shape != (r["t_frames"], r["d_feat"]):
                    raise DimensionMismatchError(
                        f"{r['feature_file']}: blob shape {feats.shape} != manifest "
                        f"({r['t_frames']}, {r['d_feat']})"
                    )
                if d_corpus is None:
                    d_corpus = feats.shape[1]
                elif feats.shape[1] != d_corpus:
                    raise DimensionMismatchError(
                        f"{r['feature_file']}: d_feat {feats.shape[1]} != corpus {d_corpus}"
                    )
                responses.append(
                    Response(r["part"], int(r["index"]), r["prompt"], feats, float(r["duration_s"]))
                )
            sessions.append(Session(sid, responses, labels, mask))
    return sessions


def corpus_digest(dir_path: Path | str) -> str:
    """Content digest of a corpus manifest (guards cross-corpus comparisons)."""
    manifest = Path(dir_path) / MANIFEST
    if not manifest.is_file():
        raise MissingFileError(f"manifest not found: {manifest}")
    return hashlib.sha256(manifest.read_bytes()).hexdigest()


def label_statistics(sessions: Sequence[Session]) -> dict[str, dict[str, float]]:
    stats = {}
    for k, t in enumerate(TARGETS):
        vals = np.array([s.labels.as_tuple()[k] for s in sessions if s.mask[k]])
        stats[t] = {
            "n": int(vals.size),
            "mean": float(vals.mean()) if vals.size else math.nan,
            "std": float(vals.std()) if vals.size else math.nan,
        }
    return stats
