"""Proposal ranking: text alignment score, fidelity penalty, and selection.

Each proposal gets an alignment confidence in [0, 1] (cosine similarity
mapped affinely) and a fidelity penalty (mean per-pixel Euclidean RGB
distance to the original); the winner maximizes alignment minus
alpha times the penalty.  Disabled components contribute 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Image, TextPrompt
from .errors import BackendError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 5.0


@dataclass(frozen=True)
class AssessmentConfig:
    alpha: float = DEFAULT_ALPHA
    enable_cma: bool = True
    enable_iqa: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class AssessmentScore:
    """Scores for one proposal; combined = cma - alpha*iqa with the
    fields already zeroed for disabled components."""

    proposal_index: int
    cma: float
    iqa: float
    combined: float


@dataclass(frozen=True)
class SelectionResult:
    chosen: int
    scores: tuple[AssessmentScore, ...]

    def to_dict(self) -> dict:
        return {
            "chosen": self.chosen,
            "scores": [
                {"proposal": s.proposal_index, "cma": s.cma, "iqa": s.iqa,
                 "combined": s.combined}
                for s in self.scores
            ],
        }


def _unit(vec: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0.0:
        raise BackendError(f"{what} embedding has invalid norm {norm}")
    return v / norm


def cma_score(proposal: Image, text: TextPrompt, text_embedder, image_embedder) -> float:
    """Cosine similarity of proposal and text embeddings, mapped to [0, 1]."""
    t_vec = _unit(text_embedder.embed_text(text.text), "text")
    i_vec = _unit(image_embedder.embed_image(proposal), "proposal")
    if t_vec.shape != i_vec.shape:
        raise BackendError(
            f"embedding dims differ: image {i_vec.size} vs text {t_vec.size}"
        )
    cos = float(i_vec @ t_vec)
    return float(np.clip((cos + 1.0) / 2.0, 0.0, 1.0))


def iqa_score(original: Image, proposal: Image) -> float:
    """Mean per-pixel Euclidean norm of the RGB difference; 0 means identical."""
    if (original.height, original.width) != (proposal.height, proposal.width):
        raise ShapeError(
            f"original {original.height}x{original.width} vs "
            f"proposal {proposal.height}x{proposal.width}"
        )
    diff = original.data.astype(np.float64) - proposal.data.astype(np.float64)
    return float(np.sqrt((diff * diff).sum(axis=2)).mean())


def effective_scores(
    scores: Sequence[AssessmentScore], config: AssessmentConfig
) -> list[AssessmentScore]:
    """Zero disabled components and recompute the combined value."""
    out = []
    for s in scores:
        cma = s.cma if config.enable_cma else 0.0
        iqa = s.iqa if config.enable_iqa else 0.0
        out.append(AssessmentScore(
            proposal_index=s.proposal_index, cma=cma, iqa=iqa,
            combined=cma - config.alpha * iqa,
        ))
    return out


def select(
    scores: Sequence[AssessmentScore], config: AssessmentConfig = AssessmentConfig()
) -> SelectionResult:
    """Argmax of the combined score; ties go to the smallest proposal index."""
    if len(scores) == 0:
        raise ValueError("select needs at least one score")
    eff = effective_scores(scores, config)
    best = 0
    for i in range(1, len(eff)):
        if eff[i].combined > eff[best].combined:
            best = i
    return SelectionResult(chosen=eff[best].proposal_index, scores=tuple(eff))


def assess(
    original: Image,
    proposals: Sequence[Image],
    text: TextPrompt,
    text_embedder,
    image_embedder,
    config: AssessmentConfig = AssessmentConfig(),
) -> SelectionResult:
    """Score every proposal (respecting enable flags) and pick the best.

    A proposal whose backend call fails is excluded with a warning; if
    every proposal is excluded a BackendError is raised.
    """
    if len(proposals) == 0:
        raise ValueError("assess needs at least one proposal")
    scores: list[AssessmentScore] = []
    failures = 0
    for k, image in enumerate(proposals):
        try:
            cma = (
                cma_score(image, text, text_embedder, image_embedder)
                if config.enable_cma else 0.0
            )
            iqa = iqa_score(original, image) if config.enable_iqa else 0.0
        except (BackendError, ShapeError) as exc:
            log.warning("excluding proposal %d from assessment: %s", k, exc)
            failures += 1
            continue
        scores.append(AssessmentScore(
            proposal_index=k, cma=cma, iqa=iqa,
            combined=cma - config.alpha * iqa,
        ))
    if not scores:
        raise BackendError(f"assessment failed for all {failures} proposals")
    return select(scores, config)
