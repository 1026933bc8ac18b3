import itertools

import numpy as np
import pytest

from desclite.data import DescriptorSet
from desclite.errors import ConfigError
from desclite.eval import (
    average_precision,
    eval_matching,
    eval_retrieval,
    eval_verification,
)


def hand_average_precision(rel):
    """Independent AP oracle: running-count enumeration."""
    hits = 0
    total = 0.0
    for rank, r in enumerate(rel, start=1):
        if r:
            hits += 1
            total += hits / rank
    return total / sum(rel)


def make_set(descriptors, labels, seqs=None, tiers=None):
    n = len(descriptors)
    return DescriptorSet(
        descriptors=np.asarray(descriptors, dtype=np.float64),
        labels=labels,
        sequence_ids=np.zeros(n, dtype=np.int64) if seqs is None else seqs,
        tiers=tiers,
    )


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([1, 1, 1]) == 1.0

    def test_single_relevant_at_rank_3(self):
        assert average_precision([0, 0, 1]) == pytest.approx(1 / 3, abs=1e-15)

    def test_interleaved(self):
        assert average_precision([1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)

    def test_exhaustive_hand_oracle_up_to_len_8(self):
        for length in range(1, 9):
            for bits in itertools.product((0, 1), repeat=length):
                if sum(bits) == 0:
                    continue
                assert average_precision(list(bits)) == pytest.approx(
                    hand_average_precision(bits), abs=1e-12)

    def test_zero_relevant_rejected(self):
        with pytest.raises(ConfigError):
            average_precision([0, 0, 0])


class TestVerification:
    def test_separable_embeddings_ap_1(self):
        rng = np.random.default_rng(0)
        centers = np.eye(4)
        labels = np.repeat(np.arange(4), 5)
        x = centers[labels] + 0.01 * rng.standard_normal((20, 4))
        report = eval_verification(make_set(x, labels), pairs_per_tier=50, seed=1)
        assert report.map_overall == 1.0
        assert report.task == "verification"

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(1)
        labels = np.repeat(np.arange(40), 4)
        x = rng.standard_normal((160, 8))  # no class structure at all
        report = eval_verification(make_set(x, labels), pairs_per_tier=4000, seed=2)
        assert abs(report.map_overall - 0.5) <= 0.05

    def test_deterministic_with_duplicate_distances(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        x = np.zeros((6, 3))  # all pairs tie at distance zero
        a = eval_verification(make_set(x, labels), pairs_per_tier=20, seed=3)
        b = eval_verification(make_set(x, labels), pairs_per_tier=20, seed=3)
        assert a.map_overall == b.map_overall
        assert a.map_by_tier == b.map_by_tier

    def test_tier_breakdown_present(self):
        rng = np.random.default_rng(2)
        labels = np.repeat(np.arange(10), 4)
        tiers = np.tile([0, 0, 1, 2], 10).astype(np.uint8)
        x = rng.standard_normal((40, 6))
        report = eval_verification(make_set(x, labels, tiers=tiers),
                                   pairs_per_tier=30, seed=4)
        assert set(report.map_by_tier) == {"easy", "hard", "tough"}

    def test_insufficient_classes(self):
        with pytest.raises(ConfigError):
            eval_verification(make_set(np.zeros((3, 2)), [0, 0, 1]), seed=0)


class TestMatching:
    def test_identity_target_maps_to_1(self):
        rng = np.random.default_rng(0)
        base = rng.standard_normal((12, 5))
        x = np.vstack([base, base])
        labels = np.concatenate([np.arange(12), np.arange(12)])
        seqs = np.concatenate([np.zeros(12, int), np.ones(12, int)])
        report = eval_matching(make_set(x, labels, seqs))
        assert report.map_overall == 1.0
        assert report.num_queries == 1

    def test_permuted_labels_near_chance(self):
        rng = np.random.default_rng(1)
        n = 400
        base = rng.standard_normal((n, 16))
        perm = rng.permutation(n)
        x = np.vstack([base, base[perm]])
        labels = np.concatenate([np.arange(n), np.arange(n)])  # target rows shuffled
        seqs = np.concatenate([np.zeros(n, int), np.ones(n, int)])
        report = eval_matching(make_set(x, labels, seqs))
        # NN of each reference is its own copy at a random label position
        assert report.map_overall <= 3.0 / n * 3

    def test_three_patch_hand_instance(self):
        # reference a,b,c; target nearest neighbors: a->b (wrong, d=0.1),
        # b->a (wrong, d=0.2), c->c (right, d=0.3) => relevance [0,0,1], AP=1/3
        ref = np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]])
        tgt = np.array([[10.0, 0.2], [0.0, 0.1], [20.0, 0.3]])
        x = np.vstack([ref, tgt])
        labels = np.array([0, 1, 2, 1, 0, 2])
        seqs = np.array([0, 0, 0, 1, 1, 1])
        report = eval_matching(make_set(x, labels, seqs))
        assert report.map_overall == pytest.approx(1 / 3, abs=1e-12)

    def test_no_shared_labels_skipped_with_warning(self):
        x = np.random.default_rng(2).standard_normal((4, 3))
        labels = np.array([0, 1, 2, 3])
        seqs = np.array([0, 0, 1, 1])
        with pytest.warns(RuntimeWarning, match="share no labels"):
            with pytest.raises(ConfigError):
                eval_matching(make_set(x, labels, seqs))

    def test_per_tier_buckets(self):
        rng = np.random.default_rng(3)
        base = rng.standard_normal((10, 4))
        x = np.vstack([base, base + 0.001, base + 0.002])
        labels = np.tile(np.arange(10), 3)
        seqs = np.repeat([0, 1, 2], 10)
        tiers = np.repeat([0, 0, 2], 10).astype(np.uint8)
        report = eval_matching(make_set(x, labels, seqs, tiers))
        assert set(report.map_by_tier) == {"easy", "tough"}


class TestRetrieval:
    def test_nearest_same_label_gives_1(self):
        rng = np.random.default_rng(0)
        centers = np.eye(5) * 10
        labels = np.repeat(np.arange(5), 3)
        x = centers[labels] + 0.01 * rng.standard_normal((15, 5))
        report = eval_retrieval(make_set(x, labels), distractors_per_query=8, seed=1)
        assert report.map_overall == 1.0
        assert report.num_queries == 15

    def test_identical_item_ranks_first(self):
        x = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [6.0, 6.0]])
        labels = np.array([0, 0, 1, 1])
        report = eval_retrieval(make_set(x, labels), distractors_per_query=4, seed=2)
        assert report.map_overall == 1.0

    def test_five_item_hand_pool(self):
        # query label 0; same-label items at distances 2 and 4; distractors
        # at 1, 3, 5 => relevance by distance = [0,1,0,1,0], AP = (1/2+2/4)/2
        x = np.array([
            [0.0], [2.0], [4.0],      # label 0: query + two relevant
            [1.0], [3.0], [5.0],      # distractors
        ])
        labels = np.array([0, 0, 0, 1, 2, 3])
        dset = make_set(x, labels)
        report = eval_retrieval(dset, distractors_per_query=5, seed=3)
        # only queries of label 0 count; take the first query's AP from the
        # mean over the three label-0 queries by computing it directly
        from desclite.eval import average_precision
        assert report.num_queries == 3
        first_ap = (1 / 2 + 2 / 4) / 2
        assert first_ap == pytest.approx(average_precision([0, 1, 0, 1, 0]), abs=1e-12)

    def test_single_patch_classes_skipped(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.1, 0.0]])
        labels = np.array([0, 1, 2, 2])
        report = eval_retrieval(make_set(x, labels), distractors_per_query=3, seed=4)
        assert report.num_queries == 2
        assert report.num_skipped == 2


class TestInvariances:
    def _random_tiered_set(self, rng, n_classes=12, per=4):
        labels = np.repeat(np.arange(n_classes), per)
        seqs = np.tile(np.arange(per), n_classes)
        tiers = np.tile([0, 0, 1, 2], n_classes).astype(np.uint8)
        centers = rng.standard_normal((n_classes, 8)) * 2
        x = centers[labels] + 0.4 * rng.standard_normal((n_classes * per, 8))
        return make_set(x, labels, seqs, tiers)

    def test_orthogonal_transform_invariance(self):
        rng = np.random.default_rng(5)
        dset = self._random_tiered_set(rng)
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        rotated = DescriptorSet(dset.descriptors @ q, dset.labels,
                                dset.sequence_ids, tiers=dset.tiers)
        for task, kwargs in (
            (eval_verification, {"pairs_per_tier": 40}),
            (eval_matching, {}),
            (eval_retrieval, {"distractors_per_query": 10}),
        ):
            a = task(dset, seed=7, **kwargs)
            b = task(rotated, seed=7, **kwargs)
            assert abs(a.map_overall - b.map_overall) <= 1e-12
            for tier in a.map_by_tier:
                assert abs(a.map_by_tier[tier] - b.map_by_tier[tier]) <= 1e-12

    def test_global_scaling_invariance(self):
        rng = np.random.default_rng(6)
        dset = self._random_tiered_set(rng)
        scaled = DescriptorSet(dset.descriptors * 7.5, dset.labels,
                               dset.sequence_ids, tiers=dset.tiers)
        a = eval_matching(dset, seed=8)
        b = eval_matching(scaled, seed=8)
        assert abs(a.map_overall - b.map_overall) <= 1e-12

    def test_reports_deterministic(self):
        rng = np.random.default_rng(7)
        dset = self._random_tiered_set(rng)
        a = eval_verification(dset, pairs_per_tier=30, seed=9)
        b = eval_verification(dset, pairs_per_tier=30, seed=9)
        assert a == b

    def test_report_lines_format(self):
        rng = np.random.default_rng(8)
        dset = self._random_tiered_set(rng)
        report = eval_matching(dset, seed=1)
        lines = report.lines()
        assert lines[0] == "task=matching"
        assert any(line.startswith("map_overall=") for line in lines)
        assert any(line.startswith("tier.") for line in lines)
