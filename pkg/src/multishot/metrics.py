"""Evaluation metrics for generated multi-shot videos.

Every metric here starts from numbers an external model already produced:
per-frame transition logits from a shot-boundary detector, transition-type
labels from a classifier, and per-shot feature vectors.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .curation import TRANSITION_TYPES
from .errors import DomainError

NO_TRANSITION = "no_transition"
PREDICTION_TYPES = TRANSITION_TYPES + (NO_TRANSITION,)

EIG_CLAMP_TOL = 1e-8


def transition_confidence(logits: Sequence[float]) -> float:
    """Largest per-frame transition probability, ``max(sigmoid(d))``."""
    d = np.asarray(logits, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise DomainError("need a nonempty 1-D sequence of transition logits")
    if not np.all(np.isfinite(d)):
        raise DomainError("transition logits must be finite")
    return float(np.max(expit(d)))


@dataclass(frozen=True)
class TypedPrediction:
    clip_id: str
    predicted_type: str
    ground_truth_type: str

    def __post_init__(self):
        if self.predicted_type not in PREDICTION_TYPES:
            raise DomainError(f"{self.clip_id}: unknown predicted type {self.predicted_type!r}")
        if self.ground_truth_type not in TRANSITION_TYPES:
            raise DomainError(f"{self.clip_id}: unknown ground-truth type {self.ground_truth_type!r}")


def type_accuracy(preds: Sequence[TypedPrediction]) -> float:
    if not preds:
        raise DomainError("type_accuracy needs at least one prediction")
    hits = sum(p.predicted_type == p.ground_truth_type for p in preds)
    return hits / len(preds)


def type_distribution(preds: Sequence[TypedPrediction]) -> dict[str, int]:
    """Counts of predicted types, in the fixed order of ``PREDICTION_TYPES``."""
    if not preds:
        raise DomainError("type_distribution needs at least one prediction")
    counts = Counter(p.predicted_type for p in preds)
    return {t: counts.get(t, 0) for t in PREDICTION_TYPES}


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DomainError(f"feature dims differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cannot take cosine similarity of a zero vector")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def consistency_scores(
    semantic_a,
    semantic_b,
    subject_sims: Sequence[float],
    background_sims: Sequence[float],
) -> tuple[float, float]:
    """``(semantic, visual)`` cross-shot consistency.

    ``semantic`` is the cosine between the two shots' feature vectors;
    ``visual`` averages ``(subject + background) / 2`` over adjacent-shot pairs.
    """
    if len(subject_sims) == 0 or len(subject_sims) != len(background_sims):
        raise DomainError("subject and background similarity lists must be nonempty and equal length")
    semantic = cosine_similarity(semantic_a, semantic_b)
    pair = (np.asarray(subject_sims, dtype=np.float64) + np.asarray(background_sims, dtype=np.float64)) / 2
    return semantic, float(np.mean(pair))


def _moments(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError(f"need an (n >= 2, dim) feature matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("features must be finite")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False, ddof=1))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -EIG_CLAMP_TOL * max(1.0, abs(w).max()):
        raise DomainError(f"covariance is not positive semidefinite (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(A + B - 2 (A B)^{1/2})``.

    ``tr((A B)^{1/2})`` equals ``tr((A^{1/2} B A^{1/2})^{1/2})``, whose argument
    is symmetric PSD, so both roots come from symmetric eigendecompositions.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise DomainError("feature dimensions differ")
    ra = _psd_sqrt(cov_a)
    w = np.linalg.eigvalsh((ra @ cov_b @ ra + (ra @ cov_b @ ra).T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def frechet_distance(a, b) -> float:
    """Fréchet distance between Gaussians fit to two ``(n, dim)`` feature sets."""
    mu_a, cov_a = _moments(a)
    mu_b, cov_b = _moments(b)
    if mu_a.shape != mu_b.shape:
        raise DomainError(f"feature dims differ: {mu_a.size} vs {mu_b.size}")
    return frechet_distance_from_moments(mu_a, cov_a, mu_b, cov_b)
