"""Scoring test inputs for in-distribution-ness and detection metrics.

The detector is temperature-scaled maximum softmax probability: the score
of an input is the largest class probability after dividing the logits by a
temperature. Accept/reject uses a threshold with >= inclusion. AUROC
follows the Mann-Whitney convention: the probability that an ID input
outscores an OOD input, with ties worth half.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import nets
from .errors import MetricError, ParameterError

ACCEPT_ID = "accept-ID"
REJECT_OOD = "reject-OOD"


@dataclass(frozen=True)
class DetectorConfig:
    temperature: float = 100.0
    threshold: float | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ParameterError("detector temperature must be > 0")


@dataclass(frozen=True)
class ScoreSet:
    """Scores for one evaluation group (e.g. SOC-ID, EOC-ID, Holdout-OOD)."""

    scores: tuple
    group: str

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))


def msp_scores(logits, temperature: float) -> np.ndarray:
    """Row-wise max softmax probability of logits / temperature."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] < 2:
        raise ParameterError("need at least 2 classes for an MSP score")
    return nets.softmax(arr / temperature).max(axis=1)


def msp_score(logits, temperature: float) -> float:
    """MSP score of a single M-vector of logits; lies in [1/M, 1]."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1:
        raise ParameterError("msp_score expects a single logit vector")
    return float(msp_scores(arr, temperature)[0])


def decide(score: float, beta_thresh: float) -> str:
    """Accept as ID when score >= threshold, otherwise reject as OOD."""
    return ACCEPT_ID if score >= beta_thresh else REJECT_OOD


def auroc(id_scores, ood_scores) -> float:
    """Percentage AUROC: mean over all ID x OOD pairs of
    1[id > ood] + 0.5 * 1[id == ood], computed via tied ranks."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if id_scores.size == 0 or ood_scores.size == 0:
        raise MetricError("auroc needs nonempty ID and OOD score lists")
    combined = np.concatenate([id_scores, ood_scores])
    ranks = stats.rankdata(combined, method="average")
    n_id, n_ood = id_scores.size, ood_scores.size
    # rank sum minus its minimum counts wins (+ half per tie) exactly
    wins = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return 100.0 * wins / (n_id * n_ood)


def tpr_threshold(id_scores, target_tpr: float) -> float:
    """Largest threshold keeping at least ``target_tpr`` of the ID scores.

    Returns the k-th largest score where k is the smallest count with
    k/n >= target_tpr, so thresholding at the result with >= inclusion
    achieves the target on the calibration list itself.
    """
    if not 0.0 < target_tpr <= 1.0:
        raise ParameterError(f"target_tpr must lie in (0, 1], got {target_tpr}")
    scores = np.sort(np.asarray(id_scores, dtype=np.float64))[::-1]
    if scores.size == 0:
        raise MetricError("tpr_threshold needs a nonempty score list")
    n = scores.size
    fractions = np.arange(1, n + 1) / n
    k = int(np.argmax(fractions >= target_tpr)) + 1
    if fractions[k - 1] < target_tpr:
        k = n
    return float(scores[k - 1])


def temperature_sweep(id_logits, ood_logits, temperatures) -> dict:
    """AUROC at each candidate temperature (helper; no automatic selection)."""
    return {
        float(t): auroc(msp_scores(id_logits, t), msp_scores(ood_logits, t))
        for t in temperatures
    }


# ---------------------------------------------------------------------------
# score persistence (line-delimited (group, score) records)


def save_scores(path, score_sets) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ss in score_sets:
            for s in ss.scores:
                fh.write(json.dumps({"group": ss.group, "score": s}) + "\n")
    return path


def load_scores(path) -> list:
    path = Path(path)
    if not path.exists():
        raise MetricError(f"score file does not exist: {path}")
    groups: dict = {}
    order = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            g = rec["group"]
            if g not in groups:
                groups[g] = []
                order.append(g)
            groups[g].append(float(rec["score"]))
    return [ScoreSet(scores=tuple(groups[g]), group=g) for g in order]
