"""Box parsing, IoU success rates, classification accuracy and false-positive rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

THRESHOLDS = (0.5, 0.7, 0.9)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive cell box; a single cell has area 1."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {self.as_tuple()}")
        if min(self.as_tuple()) < 0:
            raise ValueError(f"negative coordinate in {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    @classmethod
    def of(cls, box) -> "BoundingBox":
        return box if isinstance(box, BoundingBox) else cls(*(int(v) for v in box))


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    tokens: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return False


def iou(a, b) -> float:
    a, b = BoundingBox.of(a), BoundingBox.of(b)
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    inter = max(w, 0) * max(h, 0)
    return inter / (a.area + b.area - inter)


def parse_box_answer(tokens: Sequence[str], grid_size: int | None = None) -> BoundingBox | ParseFailure:
    """Accept exactly ``[ a , b , c , d ]`` (optionally followed by ``<end>``)."""
    toks = tuple(tokens)
    body = toks[:-1] if toks and toks[-1] == "<end>" else toks
    if len(body) != 9:
        return ParseFailure(f"expected 9 box tokens, got {len(body)}", toks)
    if body[0] != "[" or body[8] != "]" or any(body[i] != "," for i in (2, 4, 6)):
        return ParseFailure("malformed box template", toks)
    vals = []
    for t in body[1:8:2]:
        if not t.isdigit():
            return ParseFailure(f"non-coordinate token {t!r}", toks)
        vals.append(int(t))
    if grid_size is not None and max(vals) >= grid_size:
        return ParseFailure("coordinate outside the grid", toks)
    if vals[0] > vals[2] or vals[1] > vals[3]:
        return ParseFailure("inverted box", toks)
    return BoundingBox(*vals)


def success_rates(ious: Sequence[float], thresholds: Iterable[float] = THRESHOLDS) -> list[float]:
    n = len(ious)
    if n == 0:
        return [0.0 for _ in thresholds]
    return [sum(1 for v in ious if v > t) / n for t in thresholds]


def localization_score(predictions: Sequence, ground_truths: Sequence) -> float:
    """Mean of the IoU success rates at 0.5, 0.7 and 0.9; unparseable predictions miss."""
    if len(predictions) != len(ground_truths):
        raise ContractError(f"{len(predictions)} predictions for {len(ground_truths)} ground truths")
    if not predictions:
        raise ContractError("no predictions to score")
    ious = [iou(p, g) if isinstance(p, (BoundingBox, tuple, list)) and p else 0.0
            for p, g in zip(predictions, ground_truths)]
    rates = success_rates(ious)
    return sum(rates) / len(rates)


def classification_score(responses: Sequence[Sequence[str]], ground_truth_classes: Sequence[str]) -> float:
    """Fraction of responses in which the ground-truth class token appears anywhere."""
    if len(responses) != len(ground_truth_classes):
        raise ContractError(f"{len(responses)} responses for {len(ground_truth_classes)} ground truths")
    if not responses:
        return 0.0
    hits = sum(1 for r, c in zip(responses, ground_truth_classes) if c in r)
    return hits / len(responses)


def binary_accuracy(responses: Sequence[Sequence[str]], present: Sequence[bool]) -> float:
    if len(responses) != len(present):
        raise ContractError(f"{len(responses)} responses for {len(present)} labels")
    if not responses:
        return 0.0
    hits = sum(1 for r, p in zip(responses, present) if len(r) and r[0] == ("yes" if p else "no"))
    return hits / len(responses)


def false_positive_rate(binary_responses_on_controls: Sequence[Sequence[str]]) -> float:
    """Fraction of object-removed controls answered "yes"."""
    if not binary_responses_on_controls:
        return 0.0
    yes = sum(1 for r in binary_responses_on_controls if len(r) and r[0] == "yes")
    return yes / len(binary_responses_on_controls)
