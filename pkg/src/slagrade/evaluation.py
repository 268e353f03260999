"""Metrics, evaluation reports, model comparison and scatter export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .backbone import Prediction
from .corpus import Session
from .scale import TARGETS

OVERALL_MODES = ("ori_head", "part_mean")
TOLERANCES = (0.5, 1.0)
ARCH = {"stg": "Ens", "app_only": "Ens", "ctg": "Uni", "mtl": "Uni", "mtl_app": "Uni"}


class UndefinedMetricError(ValueError):
    """Metric has no value for these inputs (e.g. correlation of a constant)."""


class CorpusMismatchError(ValueError):
    pass


class Grader(Protocol):
    def predict(self, session: Session) -> Prediction: ...


def _pair(pred, gold, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gold, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {g.size} labels")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} pairs, got {p.size}")
    return p, g


def rmse(pred, gold) -> float:
    p, g = _pair(pred, gold)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def pcc(pred, gold) -> float:
    """Sample Pearson correlation; constant inputs raise :class:`UndefinedMetricError`."""
    p, g = _pair(pred, gold, min_len=2)
    dp, dg = p - p.mean(), g - g.mean()
    sp, sg = float(dp @ dp), float(dg @ dg)
    if sp == 0.0 or sg == 0.0:
        raise UndefinedMetricError("pearson correlation undefined for constant input")
    r = float(dp @ dg) / math.sqrt(sp * sg)
    return min(1.0, max(-1.0, r))


def tolerance_accuracy(pred, gold, tau: float) -> float:
    """Percentage of predictions with ``|pred - gold| <= tau`` (boundary inclusive)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    p, g = _pair(pred, gold)
    return float(100.0 * np.mean(np.abs(p - g) <= tau))


# -- reports -----------------------------------------------------------------


@dataclass
class TargetMetrics:
    n: int
    rmse: float
    pcc: float | None
    acc_0_5: float
    acc_1_0: float

    @classmethod
    def compute(cls, pred: Sequence[float], gold: Sequence[float]) -> "TargetMetrics | None":
        if len(gold) == 0:
            return None
        try:
            r = pcc(pred, gold)
        except (UndefinedMetricError, ValueError):
            r = None
        return cls(len(gold), rmse(pred, gold), r, tolerance_accuracy(pred, gold, 0.5),
                   tolerance_accuracy(pred, gold, 1.0))


@dataclass
class PredictionRecord:
    session_id: str
    gold: tuple[float, ...]
    mask: tuple[bool, ...]
    prediction: Prediction

    def to_json(self) -> dict:
        p = self.prediction
        return {
            "session_id": self.session_id,
            "gold": list(self.gold),
            "mask": list(self.mask),
            "pred": {"p1": p.p1, "p3": p.p3, "p4": p.p4, "p5": p.p5,
                     "ori_overall": p.ori_overall, "part_mean_overall": p.part_mean_overall},
        }

    @classmethod
    def from_json(cls, d: dict) -> "PredictionRecord":
        q = d["pred"]
        pred = Prediction(q["p1"], q["p3"], q["p4"], q["p5"], q["ori_overall"], q["part_mean_overall"])
        return cls(d["session_id"], tuple(d["gold"]), tuple(d["mask"]), pred)


@dataclass
class EvalReport:
    model: str
    n_sessions: int
    overall_modes: tuple[str, ...]
    targets: dict[str, TargetMetrics | None]
    overall: dict[str, TargetMetrics | None]
    corpus_digest: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def overall_mode(self) -> str:
        return self.overall_modes[0]

    def overall_rmse(self, mode: str | None = None) -> float:
        m = self.overall[mode or self.overall_mode]
        return math.nan if m is None else m.rmse

    def to_json(self) -> dict:
        def cell(m):
            return None if m is None else m.__dict__.copy()

        return {
            "model": self.model,
            "arch": ARCH.get(self.model),
            "n_sessions": self.n_sessions,
            "corpus_digest": self.corpus_digest,
            "overall_modes": list(self.overall_modes),
            "targets": {k: cell(v) for k, v in self.targets.items()},
            "overall": {k: cell(v) for k, v in self.overall.items()},
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        def cell(m):
            return None if m is None else TargetMetrics(**m)

        return cls(d["model"], d["n_sessions"], tuple(d["overall_modes"]),
                   {k: cell(v) for k, v in d["targets"].items()},
                   {k: cell(v) for k, v in d["overall"].items()},
                   d.get("corpus_digest"), d.get("extra", {}))

    def rows(self) -> list[tuple[str, TargetMetrics | None]]:
        out = [(k.upper(), v) for k, v in self.targets.items()]
        out += [(f"Overall ({m})", self.overall[m]) for m in self.overall_modes]
        return out

    def to_text(self) -> str:
        head = f"model={self.model} sessions={self.n_sessions}"
        if self.corpus_digest:
            head += f" corpus={self.corpus_digest[:12]}"
        lines = [head, f"{'Target':<22}{'N':>6}{'RMSE':>9}{'PCC':>11}{'%<=0.5':>9}{'%<=1.0':>9}"]
        for name, m in self.rows():
            if m is None:
                lines.append(f"{name:<22}{'absent':>6}")
                continue
            r = "undefined" if m.pcc is None else f"{m.pcc:.3f}"
            lines.append(f"{name:<22}{m.n:>6}{m.rmse:>9.3f}{r:>11}{m.acc_0_5:>9.1f}{m.acc_1_0:>9.1f}")
        return "\n".join(lines) + "\n"


def predict_all(grader: Grader, sessions: Iterable[Session]) -> list[PredictionRecord]:
    return [
        PredictionRecord(s.session_id, s.labels.as_tuple(), tuple(s.mask), grader.predict(s))
        for s in sessions
    ]


def score_records(records: Sequence[PredictionRecord], model: str,
                  overall_modes: Sequence[str] = ("part_mean",),
                  corpus_digest: str | None = None) -> EvalReport:
    """Metrics over unmasked labels only; a target with no labels is ``None``."""
    for m in overall_modes:
        if m not in OVERALL_MODES:
            raise ValueError(f"unknown overall mode {m!r}; expected one of {OVERALL_MODES}")
    targets = {}
    for k, t in enumerate(TARGETS[:4]):
        sel = [r for r in records if r.mask[k]]
        targets[t] = TargetMetrics.compute([r.prediction.parts()[k] for r in sel], [r.gold[k] for r in sel])
    sel = [r for r in records if r.mask[4]]
    overall = {
        m: TargetMetrics.compute([r.prediction.overall(m) for r in sel], [r.gold[4] for r in sel])
        for m in overall_modes
    }
    return EvalReport(model, len(records), tuple(overall_modes), targets, overall, corpus_digest)


def evaluate(grader: Grader, sessions: Sequence[Session], overall_mode: str | Sequence[str] = "part_mean",
             model: str | None = None, corpus_digest: str | None = None
             ) -> tuple[EvalReport, list[PredictionRecord]]:
    modes = (overall_mode,) if isinstance(overall_mode, str) else tuple(overall_mode)
    records = predict_all(grader, sessions)
    tag = model or getattr(grader, "tag", type(grader).__name__)
    return score_records(records, tag, modes, corpus_digest), records


def write_records(records: Sequence[PredictionRecord], path: Path | str) -> None:
    Path(path).write_text("".join(json.dumps(r.to_json()) + "\n" for r in records), newline="\n")


def read_records(path: Path | str) -> list[PredictionRecord]:
    return [PredictionRecord.from_json(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]


# -- comparison ----------------------------------------------------------------


def compare_reports(reports: Sequence[EvalReport], mode: str | None = None) -> str:
    """Table of overall metrics sorted by RMSE (ties broken by model tag)."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    digests = {r.corpus_digest for r in reports}
    if len(digests) > 1:
        raise CorpusMismatchError(
            "refusing to compare reports from different eval corpora: "
            + ", ".join(f"{r.model}={str(r.corpus_digest)[:12]}" for r in reports)
        )

    def key(r):
        m = r.overall.get(mode or r.overall_mode)
        return (math.inf if m is None else m.rmse, r.model)

    lines = [f"{'Arch':<6}{'Model':<12}{'RMSE':>8}{'PCC':>11}{'%<=0.5':>9}{'%<=1.0':>9}"]
    for r in sorted(reports, key=key):
        m = r.overall.get(mode or r.overall_mode)
        arch = ARCH.get(r.model, "?")
        if m is None:
            lines.append(f"{arch:<6}{r.model:<12}{'absent':>8}")
            continue
        c = "undefined" if m.pcc is None else f"{m.pcc:.3f}"
        lines.append(f"{arch:<6}{r.model:<12}{m.rmse:>8.3f}{c:>11}{m.acc_0_5:>9.1f}{m.acc_1_0:>9.1f}")
    return "\n".join(lines) + "\n"


# -- scatter --------------------------------------------------------------------


SCATTER_HEADER = ("session_id", "pred_a", "pred_b", "gold")


def export_scatter(source_a: Grader, source_b: Grader, sessions: Sequence[Session], path: Path | str,
                   overall_mode: str = "part_mean") -> float | None:
    """Write per-session overall predictions of two sources; returns their PCC.

    The first line is a ``#`` comment carrying the inter-source correlation.
    """
    rows = []
    for s in sessions:
        a = source_a.predict(s).overall(overall_mode)
        b = source_b.predict(s).overall(overall_mode)
        rows.append((s.session_id, a, b, s.labels.overall))
    try:
        r = pcc([x[1] for x in rows], [x[2] for x in rows])
    except UndefinedMetricError:
        r = None
    buf = io.StringIO(newline="")
    buf.write(f"# pcc_ab={'undefined' if r is None else repr(r)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCATTER_HEADER)
    for sid, a, b, g in rows:
        w.writerow((sid, repr(a), repr(b), repr(g)))
    Path(path).write_text(buf.getvalue(), newline="")
    return r


def read_scatter(path: Path | str) -> tuple[float | None, list[tuple[str, float, float, float]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# pcc_ab="):
        raise ValueError(f"{path}: missing pcc header comment")
    raw = lines[0].split("=", 1)[1]
    header_pcc = None if raw == "undefined" else float(raw)
    reader = csv.reader(lines[1:])
    if tuple(next(reader)) != SCATTER_HEADER:
        raise ValueError(f"{path}: unexpected column header")
    rows = [(sid, float(a), float(b), float(g)) for sid, a, b, g in reader]
    return header_pcc, rows
