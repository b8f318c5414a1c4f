import numpy as np
import pytest

from retouch import (
    BackendError,
    BinaryMask,
    MaskGenConfig,
    NoMatchingEntityError,
    ScoredEntity,
    TextPrompt,
    adaptive_threshold,
    apply_mask,
    fixed_threshold,
    generate_mask,
    location_refine,
    mask_union,
    parse_location,
    score_entities,
)
from retouch.backends.mocks import FixtureEmbedder, FixtureSegmenter, HashEmbedder
from retouch.mask_gen import GAP_EPSILON, LocationConstraint, grid_cell
from conftest import rand_image


def bruteforce_threshold(scores, floor):
    """Independent scalar-loop oracle: enumerate every consecutive gap."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    s = [scores[i] for i in order]
    if n == 1:
        tau, chosen = s[0], order
    else:
        gaps = [(s[i] - s[i + 1], -i) for i in range(n - 1)]
        best_gap, neg_i = max(gaps)
        k = -neg_i
        if best_gap < GAP_EPSILON:
            tau, chosen = s[-1], order
        else:
            tau, chosen = (s[k] + s[k + 1]) / 2.0, order[: k + 1]
    return tau, frozenset(i for i in chosen if scores[i] >= floor)


def rect_mask(h, w, y0, y1, x0, x1):
    data = np.zeros((h, w), dtype=np.uint8)
    data[y0:y1, x0:x1] = 1
    return BinaryMask(data)


class ConstEmbedder:
    """Returns a fixed vector for texts and (optionally another) for images."""

    def __init__(self, text_vec, image_vec=None):
        self.text_vec = np.asarray(text_vec, dtype=np.float64)
        self.image_vec = np.asarray(
            image_vec if image_vec is not None else text_vec, dtype=np.float64)

    def embed_text(self, text):
        return self.text_vec.copy()

    def embed_image(self, image):
        return self.image_vec.copy()


class TestScoreEntities:
    def test_identical_embeddings_score_one(self, rng):
        img = rand_image(rng, 8, 8)
        masks = [rect_mask(8, 8, 0, 4, 0, 8), rect_mask(8, 8, 4, 8, 0, 8)]
        emb = ConstEmbedder([0.3, 0.4])
        scored = score_entities(img, masks, TextPrompt("q"), emb, emb)
        assert [round(e.score, 12) for e in scored] == [1.0, 1.0]

    def test_orthogonal_embeddings_score_zero(self, rng):
        img = rand_image(rng, 8, 8)
        emb = ConstEmbedder([1.0, 0.0], image_vec=[0.0, 2.0])
        scored = score_entities(img, [rect_mask(8, 8, 0, 4, 0, 8)],
                                TextPrompt("q"), emb, emb)
        assert scored[0].score == pytest.approx(0.0, abs=1e-12)

    def test_fixture_scores_hand_computed(self, rng):
        # entity embeddings (1,0) and (0.6,0.8) against query (1,0)
        img = rand_image(rng, 8, 8)
        masks = [rect_mask(8, 8, 0, 4, 0, 8), rect_mask(8, 8, 4, 8, 0, 8)]
        image_table = {
            FixtureEmbedder.image_key(apply_mask(img, masks[0])): [1.0, 0.0],
            FixtureEmbedder.image_key(apply_mask(img, masks[1])): [0.6, 0.8],
        }
        emb = FixtureEmbedder({"q": [1.0, 0.0]}, image_table)
        scored = score_entities(img, masks, TextPrompt("q"), emb, emb)
        assert scored[0].score == pytest.approx(1.0, abs=1e-7)
        assert scored[1].score == pytest.approx(0.6, abs=1e-7)

    def test_dim_mismatch_rejected(self, rng):
        img = rand_image(rng, 4, 4)

        class Mismatched:
            def embed_text(self, text):
                return np.array([1.0, 0.0, 0.0])

            def embed_image(self, image):
                return np.array([1.0, 0.0])

        with pytest.raises(BackendError):
            score_entities(img, [rect_mask(4, 4, 0, 4, 0, 4)],
                           TextPrompt("q"), Mismatched(), Mismatched())

    def test_backend_failure_carries_entity_index(self, rng):
        img = rand_image(rng, 4, 4)

        class Flaky:
            def embed_text(self, text):
                return np.array([1.0, 0.0])

            def embed_image(self, image):
                raise RuntimeError("boom")

        with pytest.raises(BackendError, match="entity 0"):
            score_entities(img, [rect_mask(4, 4, 0, 4, 0, 4)],
                           TextPrompt("q"), Flaky(), Flaky())

    def test_jobs_do_not_change_order(self, rng):
        img = rand_image(rng, 16, 16)
        masks = [rect_mask(16, 16, 0, 8, 0, 16), rect_mask(16, 16, 8, 16, 0, 16),
                 rect_mask(16, 16, 0, 16, 0, 8)]
        emb = HashEmbedder(seed=3, dim=8)
        seq = score_entities(img, masks, TextPrompt("q"), emb, emb, jobs=1)
        par = score_entities(img, masks, TextPrompt("q"), emb, emb, jobs=3)
        assert [e.score for e in seq] == [e.score for e in par]


class TestAdaptiveThreshold:
    def test_worked_example(self):
        res = adaptive_threshold([0.9, 0.85, 0.3, 0.2], floor=0.2)
        assert res.tau == pytest.approx(0.575)
        assert res.selected == frozenset({0, 1})

    def test_single_score(self):
        res = adaptive_threshold([0.5], floor=0.2)
        assert res.selected == frozenset({0})
        assert res.tau == 0.5

    def test_all_equal_selects_all(self):
        res = adaptive_threshold([0.4, 0.4, 0.4], floor=0.2)
        assert res.selected == frozenset({0, 1, 2})
        assert res.tau == pytest.approx(0.4)

    def test_floor_can_empty_selection(self):
        res = adaptive_threshold([0.1, 0.05], floor=0.2)
        assert res.selected == frozenset()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            adaptive_threshold([], floor=0.0)

    def test_agrees_with_bruteforce_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 11))
            scores = np.round(rng.uniform(-1, 1, n), 3).tolist()
            floor = float(np.round(rng.uniform(-1, 1), 3))
            got = adaptive_threshold(scores, floor)
            tau, sel = bruteforce_threshold(scores, floor)
            assert got.selected == sel, (scores, floor)
            assert got.tau == pytest.approx(tau, abs=1e-12), (scores, floor)

    def test_monotone_in_raised_score(self, rng):
        # raising a selected entity's score never expels it
        for _ in range(400):
            n = int(rng.integers(2, 11))
            scores = np.round(rng.uniform(-1, 1, n), 3).tolist()
            floor = -1.0
            before = adaptive_threshold(scores, floor)
            if not before.selected:
                continue
            target = int(rng.choice(sorted(before.selected)))
            bumped = list(scores)
            bumped[target] = float(
                np.round(min(1.0, bumped[target] + rng.uniform(0, 2)), 3))
            after = adaptive_threshold(bumped, floor)
            _, oracle_sel = bruteforce_threshold(bumped, floor)
            assert after.selected == oracle_sel
            assert target in after.selected, (scores, bumped, target)

    def test_scale_invariance_of_selection(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 11))
            scores = np.round(rng.uniform(0.05, 1, n), 3).tolist()
            scale = float(rng.uniform(0.01, 1.0))
            base = adaptive_threshold(scores, floor=-1.0)
            scaled = adaptive_threshold([s * scale for s in scores], floor=-1.0)
            assert base.selected == scaled.selected
            assert scaled.tau == pytest.approx(base.tau * scale, rel=1e-9)

    def test_selected_scores_respect_tau(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 11))
            scores = rng.uniform(-1, 1, n).tolist()
            res = adaptive_threshold(scores, floor=-1.0)
            for i in range(n):
                if i in res.selected:
                    assert scores[i] >= res.tau - 1e-12
                else:
                    assert scores[i] < res.tau

    def test_fixed_threshold_baseline(self):
        res = fixed_threshold([0.9, 0.2, 0.19], tau=0.2)
        assert res.selected == frozenset({0, 1})
        assert res.tau == 0.2


class TestParseLocation:
    @pytest.mark.parametrize("text,kind", [
        ("the dog on the left", "left"),
        ("the leftmost tree", "left"),
        ("rightmost lamp", "right"),
        ("bird in the upper right", "top-right"),
        ("the top left window", "top-left"),
        ("a cat at the bottom", "bottom"),
        ("lower left corner house", "bottom-left"),
        ("middle of the street", "center"),
        ("a red car", "none"),
        ("TOP-RIGHT sign", "top-right"),
        ("right top antenna", "top-right"),
    ])
    def test_lexicon(self, text, kind):
        constraint = parse_location(TextPrompt(text))
        assert constraint.kind == kind

    def test_cells_for_left(self):
        c = parse_location(TextPrompt("dog on the left"))
        assert c.allowed_cells == frozenset({(0, 0), (1, 0), (2, 0)})

    def test_cells_for_corner(self):
        c = parse_location(TextPrompt("bird in the upper right"))
        assert c.allowed_cells == frozenset({(0, 2)})

    def test_no_keyword_allows_all_nine(self):
        c = parse_location(TextPrompt("a red car"))
        assert len(c.allowed_cells) == 9


def entity_at(h, w, cx, cy, index, score=1.0):
    data = np.zeros((h, w), dtype=np.uint8)
    data[cy, cx] = 1
    return ScoredEntity(mask=BinaryMask(data), score=score, index=index)


class TestLocationRefine:
    def test_none_is_identity(self):
        ents = [entity_at(10, 10, 1, 1, 0), entity_at(10, 10, 8, 8, 1)]
        sel = frozenset({0, 1})
        out = location_refine(ents, sel, LocationConstraint("none"), (10, 10))
        assert out == sel

    def test_left_constraint_drops_right_entity(self):
        # 300x300, centroids (50,150) and (250,150) -> cells (1,0) and (1,2)
        ents = [entity_at(300, 300, 50, 150, 0), entity_at(300, 300, 250, 150, 1)]
        out = location_refine(ents, frozenset({0, 1}),
                              LocationConstraint("left"), (300, 300))
        assert out == frozenset({0})

    def test_boundary_clamps_into_grid(self):
        # 90x90, centroid (89, 0) -> floor(3*89/90)=2, row 0 -> kept by top-right
        ents = [entity_at(90, 90, 89, 0, 0)]
        out = location_refine(ents, frozenset({0}),
                              LocationConstraint("top-right"), (90, 90))
        assert out == frozenset({0})

    def test_exhaustive_grid_against_floor_formula(self):
        h = w = 30
        for kind in ("none", "left", "right", "top", "bottom", "center",
                     "top-left", "top-right", "bottom-left", "bottom-right"):
            constraint = LocationConstraint(kind)
            for cy in range(h):
                for cx in range(w):
                    ents = [entity_at(h, w, cx, cy, 0)]
                    kept = location_refine(ents, frozenset({0}), constraint, (h, w))
                    cell = (min(2, int(np.floor(3 * cy / h))),
                            min(2, int(np.floor(3 * cx / w))))
                    expect = kind == "none" or cell in constraint.allowed_cells
                    assert (0 in kept) == expect, (kind, cx, cy)

    def test_grid_cell_helper(self):
        assert grid_cell(0, 0, 30, 30) == (0, 0)
        assert grid_cell(29, 29, 30, 30) == (2, 2)
        assert grid_cell(15, 15, 30, 30) == (1, 1)


class TestGenerateMask:
    def _fixture(self, rng, scores_by_entity):
        img = rand_image(rng, 12, 12)
        masks = [rect_mask(12, 12, 0, 12, 0, 6), rect_mask(12, 12, 0, 12, 6, 12)]
        image_table = {}
        for m, s in zip(masks, scores_by_entity):
            # score s against query (1, 0) comes from embedding (s, sqrt(1-s^2))
            vec = [s, float(np.sqrt(max(0.0, 1.0 - s * s)))]
            image_table[FixtureEmbedder.image_key(apply_mask(img, m))] = vec
        emb = FixtureEmbedder({"q": [1.0, 0.0], "the left q": [1.0, 0.0]}, image_table)
        return img, masks, emb

    def test_single_matching_entity_returns_its_mask(self, rng):
        img = rand_image(rng, 12, 12)
        mask = rect_mask(12, 12, 2, 8, 3, 9)
        table = {FixtureEmbedder.image_key(apply_mask(img, mask)): [1.0, 0.0]}
        emb = FixtureEmbedder({"q": [1.0, 0.0]}, table)
        region, report = generate_mask(img, TextPrompt("q"),
                                       FixtureSegmenter([mask]), emb, emb)
        assert np.array_equal(region.data, mask.data)
        assert report.selected == [0]

    def test_gap_rule_keeps_top_entity_only(self, rng):
        img, masks, emb = self._fixture(rng, [1.0, 0.6])
        region, report = generate_mask(img, TextPrompt("q"),
                                       FixtureSegmenter(masks), emb, emb)
        assert np.array_equal(region.data, masks[0].data)
        assert report.scores == pytest.approx([1.0, 0.6], abs=1e-6)
        assert report.refined == [0]

    def test_location_word_filters_equal_scores(self, rng):
        img, masks, emb = self._fixture(rng, [0.9, 0.9])
        region, report = generate_mask(img, TextPrompt("the left q"),
                                       FixtureSegmenter(masks), emb, emb)
        # equal scores select both; "left" keeps only the left rectangle
        assert report.selected == [0, 1]
        assert report.refined == [0]
        assert np.array_equal(region.data, masks[0].data)

    def test_no_match_raises_with_report(self, rng):
        img, masks, emb = self._fixture(rng, [0.1, 0.05])
        with pytest.raises(NoMatchingEntityError) as info:
            generate_mask(img, TextPrompt("q"), FixtureSegmenter(masks), emb, emb,
                          MaskGenConfig(floor=0.5))
        assert info.value.report.scores == pytest.approx([0.1, 0.05], abs=1e-6)

    def test_empty_segmentation_raises(self, rng):
        img = rand_image(rng, 8, 8)
        emb = HashEmbedder(seed=0, dim=4)
        with pytest.raises(NoMatchingEntityError):
            generate_mask(img, TextPrompt("q"), FixtureSegmenter([]), emb, emb)

    def test_output_is_subset_of_entity_union(self, rng):
        emb = HashEmbedder(seed=5, dim=8)
        for trial in range(10):
            img = rand_image(rng, 12, 12)
            masks = [rect_mask(12, 12,
                               int(rng.integers(0, 6)), int(rng.integers(7, 13)),
                               int(rng.integers(0, 6)), int(rng.integers(7, 13)))
                     for _ in range(3)]
            try:
                region, _ = generate_mask(img, TextPrompt(f"query {trial}"),
                                          FixtureSegmenter(masks), emb, emb,
                                          MaskGenConfig(floor=-1.0))
            except NoMatchingEntityError:
                continue
            union = mask_union(masks)
            assert np.all(region.data <= union.data)

    def test_fixed_tau_bypasses_adaptive_rule(self, rng):
        img, masks, emb = self._fixture(rng, [0.9, 0.3])
        _, adaptive = generate_mask(img, TextPrompt("q"),
                                    FixtureSegmenter(masks), emb, emb)
        _, fixed = generate_mask(img, TextPrompt("q"),
                                 FixtureSegmenter(masks), emb, emb,
                                 MaskGenConfig(fixed_tau=0.2))
        assert fixed.mode == "fixed"
        # fixed tau 0.2 keeps both entities; adaptive keeps only the top one
        assert set(fixed.refined) >= set(adaptive.refined)
        assert fixed.refined == [0, 1]
