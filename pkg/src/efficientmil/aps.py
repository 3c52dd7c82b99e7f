"""Adaptive patch selection.

Scores every instance in a bag on three criteria (classification confidence,
dissimilarity to the rest of the bag, prediction entropy), fuses them with
fixed weights, keeps the top-lambda instances, and exposes softmax
attention-like weights over the fused scores. Selection is a plain numpy
computation: no gradients flow through it, the instance classifier is trained
through the loss instead.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptyBagError
from .numeric import cosine_similarity_matrix, sigmoid, softmax, softmax_rows

ENTROPY_EPS = 1e-8


@dataclass
class APSWeights:
    """Fixed fusion weights for the three criteria."""

    w_rel: float = 1.0
    w_div: float = 0.3
    w_unc: float = 0.3


@dataclass
class APSResult:
    s_rel: np.ndarray
    s_div: np.ndarray
    s_unc: np.ndarray
    s_final: np.ndarray
    selected: list[int]          # descending fused score, ties to lower index
    attention: np.ndarray        # softmax over s_final across all N instances

    @property
    def selected_mask(self) -> np.ndarray:
        mask = np.zeros(self.s_final.shape[0], dtype=bool)
        mask[self.selected] = True
        return mask


def class_probabilities(logits: np.ndarray) -> np.ndarray:
    """Per-instance class probabilities from (N, C) logits.

    C = 1 yields the two-point distribution {p, 1-p} of the positive-class
    sigmoid, so downstream entropy keeps its usual "maximal when undecided"
    reading; C > 1 is a row-wise softmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DomainError(f"instance logits must be (N, C), got shape {logits.shape}")
    n, c = logits.shape
    if c == 0:
        raise DomainError("instance logits need at least one class column")
    if c == 1:
        p = sigmoid(logits[:, 0])
        return np.stack([p, 1.0 - p], axis=1)
    return softmax_rows(logits)


def relevance_scores(logits: np.ndarray) -> np.ndarray:
    """Maximum class probability per instance; for C=1 this is sigmoid(logit)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise DomainError(f"instance logits must be (N, C>=1), got shape {logits.shape}")
    if logits.shape[1] == 1:
        return sigmoid(logits[:, 0])
    return softmax_rows(logits).max(axis=1)


def diversity_scores(features: np.ndarray) -> np.ndarray:
    """One minus each instance's average cosine similarity to the others.

    A single-instance bag has no peers to compare against; its diversity is
    defined as 1 (the similarity-free value).
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n == 1:
        return np.ones(1)
    s = cosine_similarity_matrix(features)
    return 1.0 - (s.sum(axis=1) - np.diag(s)) / (n - 1)


def uncertainty_scores(logits: np.ndarray) -> np.ndarray:
    """Prediction entropy per instance (natural log, epsilon inside the log)."""
    p = class_probabilities(logits)
    return -(p * np.log(p + ENTROPY_EPS)).sum(axis=1)


def final_scores(s_rel, s_div, s_unc, weights: APSWeights) -> np.ndarray:
    return weights.w_rel * s_rel + weights.w_div * s_div + weights.w_unc * s_unc


def _top_lambda(s_final: np.ndarray, big_lambda: int) -> list[int]:
    """Indices of the min(lambda, N) largest scores, stable on ties.

    Returned in descending-score order; equal scores rank the smaller
    original index first.
    """
    n = s_final.shape[0]
    order = sorted(range(n), key=lambda i: (-s_final[i], i))
    return order[: min(big_lambda, n)]


def select(features: np.ndarray, logits: np.ndarray, weights: APSWeights | None = None,
           big_lambda: int = 512) -> APSResult:
    """Score all instances and keep the top-lambda by fused score."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0] if features.ndim == 2 else 0
    if n == 0:
        raise EmptyBagError("cannot select from an empty bag")
    if big_lambda < 1:
        raise DomainError(f"big_lambda must be >= 1, got {big_lambda}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] != n:
        raise DomainError(f"features have {n} rows but logits have {logits.shape[0]}")
    if weights is None:
        weights = APSWeights()

    s_rel = relevance_scores(logits)
    s_div = diversity_scores(features)
    s_unc = uncertainty_scores(logits)
    s_final = final_scores(s_rel, s_div, s_unc, weights)
    return APSResult(
        s_rel=s_rel,
        s_div=s_div,
        s_unc=s_unc,
        s_final=s_final,
        selected=_top_lambda(s_final, big_lambda),
        attention=softmax(s_final),
    )


def select_with_strategy(features: np.ndarray, logits: np.ndarray, weights: APSWeights,
                         big_lambda: int, strategy: str = "aps",
                         rng: np.random.Generator | None = None) -> APSResult:
    """Selection with pluggable ranking, for the strategy ablation.

    ``topk_relevance`` ranks by the relevance criterion alone; ``random_k``
    draws a uniform subset from ``rng``. Scores and attention weights are
    reported identically in all cases so exports stay comparable.
    """
    result = select(features, logits, weights, big_lambda)
    n = result.s_final.shape[0]
    k = min(big_lambda, n)
    if strategy == "aps":
        return result
    if strategy == "topk_relevance":
        order = sorted(range(n), key=lambda i: (-result.s_rel[i], i))
        result.selected = order[:k]
        return result
    if strategy == "random_k":
        if rng is None:
            raise DomainError("random_k selection needs a seeded generator")
        chosen = rng.choice(n, size=k, replace=False)
        result.selected = sorted(chosen.tolist(), key=lambda i: (-result.s_final[i], i))
        return result
    raise DomainError(f"unknown selection strategy {strategy!r}")


def to_csv(result: APSResult, coords: np.ndarray | None = None) -> str:
    """Render one row per instance; coordinate columns appear when available."""
    mask = result.selected_mask
    buf = io.StringIO()
    if coords is not None:
        buf.write("index,x,y,s_rel,s_div,s_unc,s_final,attention,selected\n")
    else:
        buf.write("index,s_rel,s_div,s_unc,s_final,attention,selected\n")
    for i in range(result.s_final.shape[0]):
        cells = [str(i)]
        if coords is not None:
            cells += [str(int(coords[i, 0])), str(int(coords[i, 1]))]
        cells += [
            repr(float(result.s_rel[i])),
            repr(float(result.s_div[i])),
            repr(float(result.s_unc[i])),
            repr(float(result.s_final[i])),
            repr(float(result.attention[i])),
            str(int(mask[i])),
        ]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()
