"""Query-driven mask proposal: entity scoring, adaptive threshold, location filter.

The editable region is the union of segmented entity masks whose
image/text similarity survives a largest-gap threshold on the sorted
scores, an absolute score floor, and an optional 3x3-grid location
constraint parsed from the query.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import BinaryMask, Image, TextPrompt, apply_mask, mask_centroid, mask_union
from .errors import BackendError, NoMatchingEntityError

GAP_EPSILON = 1e-6
DEFAULT_SCORE_FLOOR = 0.2

LOCATION_KINDS = (
    "none", "left", "right", "top", "bottom", "center",
    "top-left", "top-right", "bottom-left", "bottom-right",
)

_ALL_CELLS = frozenset((r, c) for r in range(3) for c in range(3))
_CELLS_BY_KIND = {
    "none": _ALL_CELLS,
    "left": frozenset((r, 0) for r in range(3)),
    "right": frozenset((r, 2) for r in range(3)),
    "top": frozenset((0, c) for c in range(3)),
    "bottom": frozenset((2, c) for c in range(3)),
    "center": frozenset({(1, 1)}),
    "top-left": frozenset({(0, 0)}),
    "top-right": frozenset({(0, 2)}),
    "bottom-left": frozenset({(2, 0)}),
    "bottom-right": frozenset({(2, 2)}),
}

_VERTICAL_WORDS = {"top": "top", "upper": "top", "bottom": "bottom", "lower": "bottom"}
_HORIZONTAL_WORDS = {
    "left": "left", "leftmost": "left", "right": "right", "rightmost": "right",
}
_CENTER_WORDS = {"center": "center", "middle": "center"}


@dataclass(frozen=True)
class ScoredEntity:
    """A segmentation mask with its query-correlation score."""

    mask: BinaryMask
    score: float
    index: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("entity score must be finite")
        if self.mask.count() == 0:
            raise ValueError("entity mask must be non-empty")


@dataclass(frozen=True)
class ThresholdResult:
    tau: float
    selected: frozenset[int]


@dataclass(frozen=True)
class LocationConstraint:
    kind: str
    allowed_cells: frozenset[tuple[int, int]] = field(default=_ALL_CELLS)

    def __post_init__(self):
        if self.kind not in LOCATION_KINDS:
            raise ValueError(f"unknown location kind {self.kind!r}")
        object.__setattr__(self, "allowed_cells", _CELLS_BY_KIND[self.kind])

    @property
    def is_none(self) -> bool:
        return self.kind == "none"


@dataclass(frozen=True)
class MaskGenConfig:
    """Selection knobs for generate_mask."""

    floor: float = DEFAULT_SCORE_FLOOR
    fixed_tau: Optional[float] = None
    crop_to_bbox: bool = False
    jobs: int = 1


@dataclass
class MaskReport:
    """Audit trail of one mask-generation run."""

    entity_count: int
    scores: list[float]
    tau: float
    mode: str
    floor: Optional[float]
    constraint_kind: str
    selected: list[int]
    refined: list[int]
    dropped_empty: list[int]

    def to_dict(self) -> dict:
        return {
            "entity_count": self.entity_count,
            "scores": self.scores,
            "tau": self.tau,
            "mode": self.mode,
            "floor": self.floor,
            "constraint": self.constraint_kind,
            "selected": self.selected,
            "refined": self.refined,
            "dropped_empty": self.dropped_empty,
        }


def _unit(vec: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0.0:
        raise BackendError(f"{what} embedding has invalid norm {norm}")
    return v / norm


def _crop_to_bbox(image: Image, mask: BinaryMask) -> Image:
    ys, xs = np.nonzero(mask.data)
    return Image(image.data[ys.min():ys.max() + 1, xs.min():xs.max() + 1, :])


def score_entities(
    image: Image,
    entities: Sequence[BinaryMask],
    query: TextPrompt,
    text_embedder,
    image_embedder,
    crop_to_bbox: bool = False,
    jobs: int = 1,
) -> list[ScoredEntity]:
    """Cosine-score each masked-out entity against the query embedding.

    The query is embedded once; each entity is embedded as the image
    multiplied by its mask (full size, black background) unless
    crop_to_bbox is set.  Scores are dot products of unit-normalized
    embeddings, so they lie in [-1, 1].
    """
    if len(entities) == 0:
        raise ValueError("score_entities needs at least one entity mask")
    try:
        t_vec = _unit(text_embedder.embed_text(query.text), "text")
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"text embedding failed: {exc}") from exc

    def embed_one(i: int) -> np.ndarray:
        masked = apply_mask(image, entities[i])
        if crop_to_bbox:
            masked = _crop_to_bbox(masked, entities[i])
        try:
            return _unit(image_embedder.embed_image(masked), f"entity {i}")
        except BackendError:
            raise
        except Exception as exc:
            raise BackendError(f"embedding entity {i} failed: {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            vecs = list(pool.map(embed_one, range(len(entities))))
    else:
        vecs = [embed_one(i) for i in range(len(entities))]

    scored = []
    for i, (mask, v) in enumerate(zip(entities, vecs)):
        if v.shape != t_vec.shape:
            raise BackendError(
                f"entity {i}: image embedding dim {v.size} != text dim {t_vec.size}"
            )
        scored.append(ScoredEntity(mask=mask, score=float(v @ t_vec), index=i))
    return scored


def adaptive_threshold(scores: Sequence[float], floor: float) -> ThresholdResult:
    """Cut the descending-sorted scores at the largest consecutive gap.

    tau is the midpoint of the widest gap; entities above the cut are
    selected, then anything below `floor` is dropped.  With a single
    score tau is that score; when all gaps are below GAP_EPSILON every
    entity is selected and tau is the smallest score.
    """
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("adaptive_threshold needs at least one score")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores must be finite")
    if not (-1.0 <= floor <= 1.0):
        raise ValueError("floor must lie in [-1, 1]")

    order = np.argsort(-arr, kind="stable")
    sorted_scores = arr[order]
    if arr.size == 1:
        tau = float(sorted_scores[0])
        chosen = order
    else:
        gaps = sorted_scores[:-1] - sorted_scores[1:]
        k_star = int(np.argmax(gaps))  # ties resolve to the smallest index
        if gaps[k_star] < GAP_EPSILON:
            tau = float(sorted_scores[-1])
            chosen = order
        else:
            tau = float((sorted_scores[k_star] + sorted_scores[k_star + 1]) / 2.0)
            chosen = order[: k_star + 1]
    selected = frozenset(int(i) for i in chosen if arr[i] >= floor)
    return ThresholdResult(tau=tau, selected=selected)


def fixed_threshold(scores: Sequence[float], tau: float) -> ThresholdResult:
    """Baseline rule: select every entity with score >= tau."""
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("fixed_threshold needs at least one score")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores must be finite")
    selected = frozenset(int(i) for i in range(arr.size) if arr[i] >= tau)
    return ThresholdResult(tau=float(tau), selected=selected)


def parse_location(query: TextPrompt) -> LocationConstraint:
    """Scan the query for position words; adjacent vertical+horizontal pairs form corners."""
    tokens = re.findall(r"[a-z0-9]+", query.text.lower())
    first_single: Optional[str] = None
    for i, tok in enumerate(tokens):
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if tok in _VERTICAL_WORDS and nxt in _HORIZONTAL_WORDS:
            return LocationConstraint(
                f"{_VERTICAL_WORDS[tok]}-{_HORIZONTAL_WORDS[nxt]}"
            )
        if tok in _HORIZONTAL_WORDS and nxt in _VERTICAL_WORDS:
            return LocationConstraint(
                f"{_VERTICAL_WORDS[nxt]}-{_HORIZONTAL_WORDS[tok]}"
            )
        if first_single is None:
            for table in (_VERTICAL_WORDS, _HORIZONTAL_WORDS, _CENTER_WORDS):
                if tok in table:
                    first_single = table[tok]
                    break
    if first_single is not None:
        return LocationConstraint(first_single)
    return LocationConstraint("none")


def grid_cell(cx: float, cy: float, width: int, height: int) -> tuple[int, int]:
    """Map a centroid to its cell in the even 3x3 split of the image plane."""
    col = min(2, max(0, int(np.floor(3.0 * cx / width))))
    row = min(2, max(0, int(np.floor(3.0 * cy / height))))
    return row, col


def location_refine(
    entities: Sequence[ScoredEntity],
    selected: frozenset[int] | set[int],
    constraint: LocationConstraint,
    image_dims: tuple[int, int],
) -> frozenset[int]:
    """Keep only selected entities whose mask centroid falls in an allowed cell.

    image_dims is (height, width); a `none` constraint passes the
    selection through untouched.
    """
    if constraint.is_none:
        return frozenset(selected)
    height, width = image_dims
    by_index = {e.index: e for e in entities}
    kept = set()
    for idx in selected:
        cx, cy = mask_centroid(by_index[idx].mask)
        if grid_cell(cx, cy, width, height) in constraint.allowed_cells:
            kept.add(idx)
    return frozenset(kept)


def generate_mask(
    image: Image,
    query: TextPrompt,
    segmenter,
    text_embedder,
    image_embedder,
    config: MaskGenConfig = MaskGenConfig(),
) -> tuple[BinaryMask, MaskReport]:
    """Full stage-1 pipeline: segment, score, threshold, location-filter, union.

    Raises NoMatchingEntityError (carrying the audit report) when the
    surviving selection is empty; the output mask is always a union of a
    subset of the segmenter's masks.
    """
    try:
        raw_masks = segmenter.segment(image)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"segmentation failed: {exc}") from exc

    dropped_empty = [i for i, m in enumerate(raw_masks) if m.count() == 0]
    candidates = [(i, m) for i, m in enumerate(raw_masks) if m.count() > 0]
    if not candidates:
        report = MaskReport(
            entity_count=len(raw_masks), scores=[], tau=float("nan"),
            mode="adaptive" if config.fixed_tau is None else "fixed",
            floor=config.floor, constraint_kind=parse_location(query).kind,
            selected=[], refined=[], dropped_empty=dropped_empty,
        )
        raise NoMatchingEntityError("segmenter produced no usable entities", report)

    scored = score_entities(
        image, [m for _, m in candidates], query, text_embedder, image_embedder,
        crop_to_bbox=config.crop_to_bbox, jobs=config.jobs,
    )
    # restore segmentation-result ordinals after dropping empty masks
    scored = [
        ScoredEntity(mask=e.mask, score=e.score, index=candidates[e.index][0])
        for e in scored
    ]
    scores = [e.score for e in scored]

    if config.fixed_tau is None:
        thr = adaptive_threshold(scores, config.floor)
        mode = "adaptive"
    else:
        thr = fixed_threshold(scores, config.fixed_tau)
        mode = "fixed"
    selected = frozenset(scored[i].index for i in thr.selected)

    constraint = parse_location(query)
    refined = location_refine(scored, selected, constraint, (image.height, image.width))

    report = MaskReport(
        entity_count=len(raw_masks),
        scores=scores,
        tau=thr.tau,
        mode=mode,
        floor=config.floor if mode == "adaptive" else None,
        constraint_kind=constraint.kind,
        selected=sorted(selected),
        refined=sorted(refined),
        dropped_empty=dropped_empty,
    )
    if not refined:
        raise NoMatchingEntityError("no entity matched the query", report)
    by_index = {e.index: e for e in scored}
    region = mask_union([by_index[i].mask for i in sorted(refined)])
    return region, report
