"""Native speaking-test score scale and its CEFR-like band labels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

PARTS: tuple[str, ...] = ("P1", "P3", "P4", "P5")
TARGETS: tuple[str, ...] = ("p1", "p3", "p4", "p5", "overall")

_BANDS = (
    (2.0, "A2"),
    (2.5, "A2+"),
    (3.0, "B1"),
    (3.5, "B1+"),
    (4.0, "B2"),
    (4.5, "B2+"),
    (5.0, "C1"),
    (5.5, "C1+"),
)

SCALE_MIN = _BANDS[0][0]
SCALE_MAX = _BANDS[-1][0]
BAND_STEP = 0.5
# midpoint of the scale; also the expectation of a uniform band prior
SCALE_CENTER = 3.75


@dataclass(frozen=True, order=True)
class Band:
    value: float
    label: str


BANDS: tuple[Band, ...] = tuple(Band(v, l) for v, l in _BANDS)


def band_values() -> list[float]:
    return [b.value for b in BANDS]


def part_index(part: str) -> int:
    """Canonical position of a part id (P1 < P3 < P4 < P5)."""
    try:
        return PARTS.index(part)
    except ValueError:
        raise ValueError(f"unknown part id {part!r}; expected one of {PARTS}") from None


def band_index(x: float) -> int:
    """Index of the band nearest to ``x`` after clamping; halves round up."""
    if not math.isfinite(x):
        raise ValueError(f"score must be finite, got {x!r}")
    x = min(max(x, SCALE_MIN), SCALE_MAX)
    # (x - 2.0) / 0.5 is exact for grid points and their midpoints
    return min(int(math.floor((x - SCALE_MIN) / BAND_STEP + 0.5)), len(BANDS) - 1)


def score_to_band(x: float) -> Band:
    return BANDS[band_index(x)]


def quantize(x: float) -> float:
    return BANDS[band_index(x)].value


def overall_from_parts(parts: Sequence[float]) -> float:
    """Overall label as the arithmetic mean of the four part scores."""
    if len(parts) != len(PARTS):
        raise ValueError(f"need {len(PARTS)} part scores, got {len(parts)}")
    for p in parts:
        if p is None or not math.isfinite(p):
            raise ValueError(f"part score missing or non-finite: {p!r}")
    return (parts[0] + parts[1] + parts[2] + parts[3]) / 4.0
