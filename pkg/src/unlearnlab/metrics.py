"""Forgetting metrics: UA, RA, TA, MIA, AG and RTE."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .errors import ContractError
from .models import ModelState, evaluate, predict_logits
from .tensor import log_softmax

METRIC_KEYS = ("UA", "RA", "TA", "MIA")


@dataclass
class MetricsReport:
    method: str
    dataset: str
    rate: float
    seed: int
    UA: float
    RA: float
    TA: float
    MIA: float
    RTE: float
    AG: float | None = None
    scenario: str = "NoAug"
    forget_accuracy: float | None = None
    mia_undefined: bool = False
    diverged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _nonempty(data: Dataset, what: str) -> None:
    if data is None or len(data) == 0:
        raise ContractError(f"{what} split is empty")


def ua(state: ModelState, forget: Dataset) -> float:
    """Forget-set error: 100 minus accuracy on the forget split."""
    _nonempty(forget, "forget")
    return 100.0 - evaluate(state, forget)


def ra(state: ModelState, retain: Dataset) -> float:
    _nonempty(retain, "retain")
    return evaluate(state, retain)


def ta(state: ModelState, test: Dataset) -> float:
    _nonempty(test, "test")
    return evaluate(state, test)


# ---------------------------------------------------------------- membership inference


def true_label_confidence(state: ModelState, data: Dataset, batch_size: int = 256) -> np.ndarray:
    """Softmax probability the model assigns to each sample's true label."""
    logp = log_softmax(predict_logits(state, data.images, batch_size))
    return np.exp(logp[np.arange(len(data)), data.labels])


@dataclass
class ConfidenceThresholdAttacker:
    """Predicts "member" when the true-label confidence reaches ``threshold``.

    ``fit`` only ever sees member (retain) and non-member (test) scores.
    """

    threshold: float = 0.5
    undefined: bool = False
    balanced_accuracy: float = field(default=float("nan"))

    def fit(self, member_scores, nonmember_scores) -> "ConfidenceThresholdAttacker":
        member = np.sort(np.asarray(member_scores, dtype=np.float64))
        nonmember = np.sort(np.asarray(nonmember_scores, dtype=np.float64))
        if member.size == 0 or nonmember.size == 0:
            raise ContractError("attacker calibration needs member and non-member scores")
        values = np.unique(np.concatenate([member, nonmember]))
        if values.size == 1:
            self.threshold = float(values[0])
            self.undefined = True
            self.balanced_accuracy = 0.5
            return self
        # candidates: below everything, midpoints between distinct values, above everything
        cands = np.concatenate([[-np.inf], (values[:-1] + values[1:]) / 2.0, [np.inf]])
        tpr = 1.0 - np.searchsorted(member, cands, side="left") / member.size
        fpr = 1.0 - np.searchsorted(nonmember, cands, side="left") / nonmember.size
        bal = 0.5 * (tpr + 1.0 - fpr)
        best = int(np.argmax(bal))
        self.threshold = float(cands[best])
        self.undefined = False
        self.balanced_accuracy = float(bal[best])
        return self

    def predict_member(self, scores) -> np.ndarray:
        return np.asarray(scores, dtype=np.float64) >= self.threshold

    def member_rate(self, scores) -> float:
        scores = np.asarray(scores)
        if scores.size == 0:
            raise ContractError("no scores to attack")
        return 100.0 * float(self.predict_member(scores).mean())


def mia_from_scores(forget_scores, member_scores, nonmember_scores) -> tuple[float, ConfidenceThresholdAttacker]:
    attacker = ConfidenceThresholdAttacker().fit(member_scores, nonmember_scores)
    return attacker.member_rate(forget_scores), attacker


def mia_score(
    state: ModelState, forget: Dataset, retain: Dataset, test: Dataset, batch_size: int = 256
) -> tuple[float, ConfidenceThresholdAttacker]:
    """Percent of forget samples the calibrated attacker calls members."""
    for d, what in ((forget, "forget"), (retain, "retain"), (test, "test")):
        _nonempty(d, what)
    return mia_from_scores(
        true_label_confidence(state, forget, batch_size),
        true_label_confidence(state, retain, batch_size),
        true_label_confidence(state, test, batch_size),
    )


# ---------------------------------------------------------------- gap and runtime


def avg_gap_from_diffs(diffs) -> float:
    diffs = list(diffs)
    return sum(abs(d) for d in diffs) / len(diffs)


def avg_gap(report: MetricsReport, reference: MetricsReport) -> float:
    """Mean absolute difference of UA, RA, TA and MIA against ``reference``."""
    if report.dataset != reference.dataset or not math.isclose(report.rate, reference.rate):
        raise ContractError(
            f"cannot compare {report.dataset}@{report.rate} with {reference.dataset}@{reference.rate}"
        )
    return avg_gap_from_diffs(getattr(report, k) - getattr(reference, k) for k in METRIC_KEYS)


class Stopwatch:
    """Accumulates wall-clock segments; only timed blocks count toward RTE."""

    def __init__(self):
        self.samples: list[float] = []

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.samples.append(time.perf_counter() - self._start)

    def add(self, seconds: float) -> None:
        self.samples.append(float(seconds))

    @property
    def seconds(self) -> float:
        return rte(self.samples)


def rte(samples) -> float:
    return float(sum(samples))


def evaluate_all(
    state: ModelState,
    forget: Dataset,
    retain: Dataset,
    test: Dataset,
    *,
    method: str,
    dataset: str,
    rate: float,
    seed: int,
    seconds: float,
    scenario: str = "NoAug",
    batch_size: int = 256,
) -> MetricsReport:
    forget_acc = evaluate(state, forget, batch_size)
    mia, attacker = mia_score(state, forget, retain, test, batch_size)
    return MetricsReport(
        method=method,
        dataset=dataset,
        rate=rate,
        seed=seed,
        UA=100.0 - forget_acc,
        RA=ra(state, retain),
        TA=ta(state, test),
        MIA=mia,
        RTE=float(seconds),
        scenario=scenario,
        forget_accuracy=forget_acc,
        mia_undefined=attacker.undefined,
    )
