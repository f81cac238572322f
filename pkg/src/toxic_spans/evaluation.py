"""Span decoding and character-offset F1 scoring.

Scores follow the shared-task definition: per post, precision is
|S & G| / |S| and recall is |S & G| / |G| over character offsets, F1 is
their harmonic mean, a post where both sets are empty scores 1 and a post
where exactly one is empty scores 0. The system score is the mean over posts.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import TOXIC_CLASS, Post, TokenizedPost, TokenSpan
from .embeddings import EMBEDDING_CONFIGS

logger = logging.getLogger(__name__)

# Marks a grid cell whose run raised
FAILED = "FAIL"


class AlignmentError(ValueError):
    """Prediction ids do not match the gold post ids."""

    def __init__(self, missing: Sequence[str], extra: Sequence[str]):
        parts = []
        if missing:
            parts.append(f"missing predictions for {', '.join(missing)}")
        if extra:
            parts.append(f"predictions for unknown posts {', '.join(extra)}")
        super().__init__("; ".join(parts) or "prediction ids do not match gold ids")
        self.missing = list(missing)
        self.extra = list(extra)


@dataclass(frozen=True)
class SpanPrediction:
    post_id: str
    offsets: FrozenSet[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "offsets", frozenset(self.offsets))


@dataclass
class ScoreReport:
    """Per-post and mean span scores for one prediction set."""

    per_post_f1: Dict[str, float]
    mean_f1: float
    num_posts: int
    num_empty_gold: int
    mean_precision: float = 0.0
    mean_recall: float = 0.0
    per_post_precision: Dict[str, float] = field(default_factory=dict)
    per_post_recall: Dict[str, float] = field(default_factory=dict)

    @property
    def counts(self) -> Tuple[int, int]:
        return self.num_posts, self.num_empty_gold

    def distribution(self) -> Dict[str, float]:
        if not self.per_post_f1:
            return {}
        values = np.fromiter(self.per_post_f1.values(), dtype=np.float64)
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        return {
            "min": float(values.min()),
            "q1": float(q1),
            "median": float(median),
            "q3": float(q3),
            "max": float(values.max()),
            "perfect": int((values == 1.0).sum()),
            "zero": int((values == 0.0).sum()),
        }

    def to_dict(self, include_per_post: bool = True) -> Dict[str, Any]:
        data = {
            "mean_f1": round(self.mean_f1, 3),
            "mean_precision": round(self.mean_precision, 3),
            "mean_recall": round(self.mean_recall, 3),
            "num_posts": self.num_posts,
            "num_empty_gold": self.num_empty_gold,
            "f1_distribution": {k: round(v, 3) if isinstance(v, float) else v
                                for k, v in self.distribution().items()},
        }
        if include_per_post:
            data["per_post_f1"] = self.per_post_f1
        return data

    def save(self, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> None:
        data = self.to_dict()
        if extra:
            data.update(extra)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)


def _offsets(spans: Union[SpanPrediction, Iterable[int]]) -> FrozenSet[int]:
    if isinstance(spans, SpanPrediction):
        return spans.offsets
    return frozenset(spans)


def span_precision(predicted: Union[SpanPrediction, Iterable[int]], gold: Iterable[int]) -> float:
    predicted, gold = _offsets(predicted), frozenset(gold)
    if not predicted:
        return 1.0 if not gold else 0.0
    return len(predicted & gold) / len(predicted)


def span_recall(predicted: Union[SpanPrediction, Iterable[int]], gold: Iterable[int]) -> float:
    predicted, gold = _offsets(predicted), frozenset(gold)
    if not gold:
        return 1.0 if not predicted else 0.0
    return len(predicted & gold) / len(gold)


def span_f1(predicted: Union[SpanPrediction, Iterable[int]], gold: Iterable[int]) -> float:
    """Character-offset F1 of one post.

    Args:
        predicted: Predicted toxic offsets.
        gold: Gold toxic offsets.

    Returns:
        1.0 when both sets are empty, 0.0 when exactly one is, otherwise the
        harmonic mean of precision and recall.
    """
    predicted, gold = _offsets(predicted), frozenset(gold)
    if not predicted and not gold:
        return 1.0
    if not predicted or not gold:
        return 0.0

    common = len(predicted & gold)
    precision = common / len(predicted)
    recall = common / len(gold)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def decode_spans(
    tokens: Sequence[TokenSpan],
    output: Any,
    post_id: str = "",
    bridge_gaps: bool = False
) -> SpanPrediction:
    """Turn per-position classes back into character offsets.

    Args:
        tokens: The post's tokens; token i aligns with output position i.
        output: A TaggerOutput or a sequence of per-position classes.
        post_id: Id recorded on the prediction.
        bridge_gaps: Also mark the characters between two consecutive toxic tokens.

    Returns:
        The union of the character ranges of tokens predicted toxic. Positions
        past the last token are ignored.
    """
    classes = getattr(output, "predicted_class", output)
    offsets = set()
    previous_end = None
    for token, predicted in zip(tokens, classes):
        if int(predicted) != TOXIC_CLASS:
            previous_end = None
            continue
        if bridge_gaps and previous_end is not None:
            offsets.update(range(previous_end, token.start))
        offsets.update(range(token.start, token.end))
        previous_end = token.end
    return SpanPrediction(post_id=post_id, offsets=frozenset(offsets))


def decode_gold(tokenized: TokenizedPost) -> SpanPrediction:
    """Decode the gold token labels as if they were perfect predictions."""
    classes = [TOXIC_CLASS if token.toxic else 0 for token in tokenized.tokens]
    return decode_spans(tokenized.tokens, classes, post_id=tokenized.id)


def label_round_trip(posts: Sequence[TokenizedPost]) -> ScoreReport:
    """Score decoded gold token labels against the gold offsets.

    Measures how much the token labeling rule loses: characters annotated
    outside any token, or token characters outside the annotation.
    """
    labeled = [p for p in posts if p.post.labeled]
    return evaluate([decode_gold(p) for p in labeled], [p.post for p in labeled])


def evaluate(predictions: Sequence[SpanPrediction], gold_posts: Sequence[Post]) -> ScoreReport:
    """Score predictions against gold posts.

    Args:
        predictions: One prediction per gold post, in any order.
        gold_posts: Posts carrying the gold offsets.

    Returns:
        Per-post and mean scores.
    """
    by_id = {prediction.post_id: prediction for prediction in predictions}
    gold_ids = [post.id for post in gold_posts]
    missing = [post_id for post_id in gold_ids if post_id not in by_id]
    extra = sorted(set(by_id) - set(gold_ids))
    if missing or extra or len(by_id) != len(predictions):
        raise AlignmentError(missing, extra)

    f1_scores, precisions, recalls = {}, {}, {}
    for post in gold_posts:
        prediction = by_id[post.id]
        f1_scores[post.id] = span_f1(prediction, post.gold_offsets)
        precisions[post.id] = span_precision(prediction, post.gold_offsets)
        recalls[post.id] = span_recall(prediction, post.gold_offsets)

    def mean(values: Mapping[str, float]) -> float:
        return float(np.mean(list(values.values()))) if values else 0.0

    report = ScoreReport(
        per_post_f1=f1_scores,
        mean_f1=mean(f1_scores),
        num_posts=len(gold_posts),
        num_empty_gold=sum(1 for post in gold_posts if not post.gold_offsets),
        mean_precision=mean(precisions),
        mean_recall=mean(recalls),
        per_post_precision=precisions,
        per_post_recall=recalls,
    )
    logger.info("Scored %d posts: mean F1 %.3f", report.num_posts, report.mean_f1)
    return report


def write_predictions(path: Union[str, Path], predictions: Iterable[SpanPrediction]) -> None:
    """One bracketed, sorted offset list per line, in the given order."""
    with open(path, "w", encoding="utf-8") as f:
        for prediction in predictions:
            f.write(json.dumps(sorted(prediction.offsets)) + "\n")


def read_predictions(path: Union[str, Path], post_ids: Optional[Sequence[str]] = None) -> List[SpanPrediction]:
    """Read a prediction file; line i belongs to post_ids[i] (or id str(i))."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Predictions not found at {path}")

    with open(path, "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip()]
    if post_ids is not None and len(post_ids) != len(lines):
        raise AlignmentError(
            missing=list(post_ids[len(lines):]),
            extra=[str(i) for i in range(len(post_ids), len(lines))])

    predictions = []
    for row, line in enumerate(lines):
        try:
            offsets = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path} line {row + 1}: malformed offset list {line!r}") from e
        post_id = post_ids[row] if post_ids is not None else str(row)
        predictions.append(SpanPrediction(post_id=post_id, offsets=frozenset(offsets)))
    return predictions


def ablation_report(
    results: Mapping[Tuple[str, str], Union[float, str]],
    rows: Sequence[str],
    columns: Optional[Sequence[str]] = None,
    title: str = ""
) -> str:
    """Render grid scores as a fixed-width table.

    Args:
        results: Score per (model variant, embedding config); FAILED marks a
            cell whose run failed. Cells absent from the mapping print `-`.
        rows: Model variants in display order.
        columns: Embedding configs in display order.
        title: Optional heading line.

    Returns:
        The table as text, scores rounded to three decimals.
    """
    columns = list(columns or EMBEDDING_CONFIGS)
    label_width = max([len("Method")] + [len(row) for row in rows])
    widths = [max(len(column), 5) for column in columns]

    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(["Method".ljust(label_width)] +
                           [column.rjust(width) for column, width in zip(columns, widths)]))
    for row in rows:
        cells = []
        for column, width in zip(columns, widths):
            value = results.get((row, column))
            if value is None:
                text = "-"
            elif value == FAILED:
                text = FAILED
            else:
                text = f"{value:.3f}"
            cells.append(text.rjust(width))
        lines.append("  ".join([row.ljust(label_width)] + cells))
    return "\n".join(lines)
