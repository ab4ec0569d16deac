from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modalign import get_logger
from modalign.exceptions import InvalidInput
from modalign.utils import breakup_iterable

__all__ = [
    "MetricsReport",
    "accuracy",
    "auc",
    "confusion_matrix",
    "macro_auc",
]

logger = get_logger()


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    if len(predictions) != len(labels):
        raise InvalidInput(
            f"{len(predictions)} prediction(s) for {len(labels)} label(s)"
        )
    if not len(labels):
        raise InvalidInput("accuracy of an empty set is undefined")
    correct = sum(int(p) == int(y) for p, y in zip(predictions, labels))
    return correct / len(labels)


def auc(
    scores: Sequence[float], binary_labels: Sequence[int], chunk: int = 1024
) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic, counted exactly
    over every positive/negative pair: a pair where the positive scores
    higher counts 1, a tie counts 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(binary_labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidInput("auc expects two vectors of the same length")
    if not np.all(np.isin(labels, (0, 1))):
        raise InvalidInput("auc labels must be 0 or 1")

    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    if not len(positives) or not len(negatives):
        raise InvalidInput(
            "AUC is undefined when labels hold a single class "
            f"({len(positives)} positive(s), {len(negatives)} negative(s))"
        )

    wins = 0
    ties = 0
    for part in breakup_iterable(positives, chunk):
        wins += int((part[:, None] > negatives[None, :]).sum())
        ties += int((part[:, None] == negatives[None, :]).sum())
    return (wins + 0.5 * ties) / (len(positives) * len(negatives))


def macro_auc(
    probabilities: np.ndarray, labels: np.ndarray
) -> Tuple[Optional[float], List[Optional[float]]]:
    """
    One-vs-rest AUC per class from `[N, K]` probabilities and multi-hot
    labels, and their mean. Classes absent from (or filling) the labels have
    no AUC; they are reported as `None` and left out of the mean.
    """
    per_class: List[Optional[float]] = []
    for k in range(labels.shape[1]):
        column = labels[:, k]
        if column.min() == column.max():
            logger.warning(
                f"AUC of class {k} is undefined on this split, skipping it"
            )
            per_class.append(None)
            continue
        per_class.append(auc(probabilities[:, k], column))
    defined = [v for v in per_class if v is not None]
    mean = float(np.mean(defined)) if defined else None
    return mean, per_class


def confusion_matrix(
    predictions: Sequence[int], labels: Sequence[int], num_classes: int
) -> List[List[int]]:
    """
    `matrix[true][predicted]` counts.
    """
    matrix = [[0] * num_classes for _ in range(num_classes)]
    for p, y in zip(predictions, labels):
        matrix[int(y)][int(p)] += 1
    return matrix


@dataclass
class MetricsReport:
    split: str
    n_samples: int
    accuracy: float
    macro_auc: Optional[float]
    per_class_auc: List[Optional[float]]
    confusion: List[List[int]]
    class_names: List[str]

    @classmethod
    def compute(
        cls,
        probabilities: np.ndarray,
        labels: np.ndarray,
        class_names: Sequence[str],
        split: str = "test",
    ) -> "MetricsReport":
        """
        Metrics from `[N, K]` sigmoid probabilities and multi-hot labels.
        Predictions and targets are the argmax of each row.
        """
        probabilities = np.asarray(probabilities, dtype=np.float64)
        labels = np.asarray(labels)
        if labels.ndim != 2 or probabilities.shape != labels.shape:
            raise InvalidInput(
                f"Probabilities {probabilities.shape} and labels "
                f"{labels.shape} must both be [N, K]"
            )
        unlabelled = np.flatnonzero(labels.sum(axis=1) == 0)
        if len(unlabelled):
            raise InvalidInput(
                f"{len(unlabelled)} record(s) have no active class, top-1 "
                "accuracy needs one per record (implicit normal class)"
            )
        predictions = probabilities.argmax(axis=1)
        targets = labels.argmax(axis=1)
        mean_auc, per_class = macro_auc(probabilities, labels)
        return cls(
            split=split,
            n_samples=int(len(labels)),
            accuracy=accuracy(predictions, targets),
            macro_auc=mean_auc,
            per_class_auc=per_class,
            confusion=confusion_matrix(
                predictions, targets, len(class_names)
            ),
            class_names=list(class_names),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
