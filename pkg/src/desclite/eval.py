"""Patch verification, image matching and patch retrieval, reported as mean
average precision with a per-noise-tier breakdown.

Protocol notes (simplified HPatches analogue, desk scale):
  verification — seeded balanced positive/negative pairs per tier, scored by
      negative distance; the overall number is the AP of the pooled ranking
      across tiers, per-tier numbers are the APs of each tier's ranking.
  matching — the smallest sequence id is the reference view; each other
      sequence is matched against it by nearest neighbor, giving one AP per
      (reference, target) pair; mAP is the mean over pairs.
  retrieval — every patch whose label has >= 2 rows queries a pool of all
      other same-label rows plus sampled distractors; mAP over queries.
All score ties break by stable index order, so reports are deterministic
per (set, seed).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import DescriptorSet, tier_name
from .errors import ConfigError
from .numerics import pairwise_distance_matrix


@dataclass
class EvalReport:
    task: str
    map_overall: float
    map_by_tier: dict = field(default_factory=dict)
    num_queries: int = 0
    num_skipped: int = 0
    config: dict = field(default_factory=dict)

    def lines(self):
        """Flat key=value rendering, one record per tier."""
        out = [f"task={self.task}"]
        for key, value in sorted(self.config.items()):
            out.append(f"config.{key}={value}")
        out.append(f"num_queries={self.num_queries}")
        out.append(f"num_skipped={self.num_skipped}")
        out.append(f"map_overall={self.map_overall:.6f}")
        for tier, value in sorted(self.map_by_tier.items()):
            out.append(f"tier.{tier}.map={value:.6f}")
        return out


def average_precision(ranked_relevance) -> float:
    """AP of a ranked 0/1 relevance list: mean of precision@r over the ranks
    of relevant items. The list must contain at least one relevant item."""
    rel = np.asarray(ranked_relevance, dtype=np.float64)
    if rel.ndim != 1 or len(rel) == 0:
        raise ConfigError("ranked_relevance must be a non-empty 1-D 0/1 list")
    total = rel.sum()
    if total == 0:
        raise ConfigError("average_precision undefined with zero relevant items")
    precision_at = np.cumsum(rel) / np.arange(1, len(rel) + 1)
    return float((precision_at * rel).sum() / total)


def _tier_of(dset: DescriptorSet, row: int) -> str:
    if dset.tiers is None:
        return "all"
    return tier_name(int(dset.tiers[row]))


def _ranked_relevance(distances: np.ndarray, relevant: np.ndarray,
                      tie_index: np.ndarray) -> np.ndarray:
    order = np.lexsort((tie_index, distances))
    return relevant[order]


def eval_verification(dset: DescriptorSet, pairs_per_tier: int = 1000,
                      seed: int = 0) -> EvalReport:
    """Ranked same/different-label pair classification by descriptor distance.

    A pair's tier is the tier of its noisier member. Pairs are sampled
    per-tier, balanced between positives and negatives.
    """
    labels = dset.labels
    classes, counts = np.unique(labels, return_counts=True)
    if np.sum(counts >= 2) < 2:
        raise ConfigError("verification needs >= 2 classes with >= 2 patches each")
    rng = np.random.default_rng(seed)
    codes = dset.tiers if dset.tiers is not None else np.zeros(len(dset), np.uint8)
    tiers_present = sorted(set(int(c) for c in codes))

    multi = set(classes[counts >= 2].tolist())
    pair_dist, pair_rel, pair_tier = [], [], []
    for code in tiers_present:
        tier_rows = np.flatnonzero(codes == code)
        got_pos = _sample_pairs(dset, tier_rows, code, codes, rng, pairs_per_tier,
                                positive=True, multi=multi)
        got_neg = _sample_pairs(dset, tier_rows, code, codes, rng, pairs_per_tier,
                                positive=False, multi=multi)
        for (i, j) in got_pos:
            pair_dist.append(float(np.linalg.norm(dset.descriptors[i] - dset.descriptors[j])))
            pair_rel.append(1.0)
            pair_tier.append(code)
        for (i, j) in got_neg:
            pair_dist.append(float(np.linalg.norm(dset.descriptors[i] - dset.descriptors[j])))
            pair_rel.append(0.0)
            pair_tier.append(code)

    dist = np.asarray(pair_dist)
    rel = np.asarray(pair_rel)
    tier_arr = np.asarray(pair_tier)
    idx = np.arange(len(dist))
    overall = average_precision(_ranked_relevance(dist, rel, idx))
    by_tier = {}
    for code in tiers_present:
        mask = tier_arr == code
        if rel[mask].sum() > 0:
            name = "all" if dset.tiers is None else tier_name(code)
            by_tier[name] = average_precision(
                _ranked_relevance(dist[mask], rel[mask], idx[mask])
            )
    return EvalReport(
        task="verification",
        map_overall=overall,
        map_by_tier=by_tier,
        num_queries=len(dist),
        num_skipped=0,
        config={"pairs_per_tier": pairs_per_tier, "seed": seed, "dim": dset.dim},
    )


def _sample_pairs(dset, tier_rows, code, codes, rng, want, positive, multi):
    """Seeded rejection sampling of pairs whose noisier member has `code`."""
    pairs = []
    if not len(tier_rows):
        return pairs
    labels = dset.labels
    attempts = 0
    max_attempts = max(50 * want, 1000)
    while len(pairs) < want and attempts < max_attempts:
        attempts += 1
        i = int(tier_rows[rng.integers(len(tier_rows))])
        if positive:
            if labels[i] not in multi:
                continue
            cand = np.flatnonzero((labels == labels[i]) & (codes <= code))
        else:
            cand = np.flatnonzero((labels != labels[i]) & (codes <= code))
        cand = cand[cand != i]
        if not len(cand):
            continue
        j = int(cand[rng.integers(len(cand))])
        pairs.append((i, j))
    return pairs


def eval_matching(dset: DescriptorSet, seed: int = 0) -> EvalReport:
    """Nearest-neighbor correspondence from the reference sequence to every
    other sequence; one AP per sequence pair."""
    seqs = np.unique(dset.sequence_ids)
    if len(seqs) < 2:
        raise ConfigError("matching needs a reference plus >= 1 target sequence")
    ref_id = int(seqs.min())
    ref_rows = np.flatnonzero(dset.sequence_ids == ref_id)
    aps = []
    tiers_of_pairs = []
    skipped = 0
    for target in seqs[seqs != ref_id]:
        tgt_rows = np.flatnonzero(dset.sequence_ids == target)
        shared = np.intersect1d(dset.labels[ref_rows], dset.labels[tgt_rows])
        if not len(shared):
            warnings.warn(
                f"matching: sequences {ref_id} and {int(target)} share no labels; skipped",
                RuntimeWarning,
                stacklevel=2,
            )
            skipped += 1
            continue
        use_ref = ref_rows[np.isin(dset.labels[ref_rows], shared)]
        dist = pairwise_distance_matrix(
            dset.descriptors[use_ref], dset.descriptors[tgt_rows]
        )
        nn = dist.argmin(axis=1)
        nn_dist = dist[np.arange(len(use_ref)), nn]
        correct = (
            dset.labels[tgt_rows][nn] == dset.labels[use_ref]
        ).astype(np.float64)
        ranked = _ranked_relevance(nn_dist, correct, np.arange(len(use_ref)))
        if correct.sum() == 0:
            skipped += 1
            continue
        aps.append(average_precision(ranked))
        if dset.tiers is None:
            tiers_of_pairs.append("all")
        else:
            codes = dset.tiers[tgt_rows]
            tiers_of_pairs.append(tier_name(int(np.bincount(codes).argmax())))
    if not aps:
        raise ConfigError("matching: no sequence pair produced a ranking")
    by_tier: dict[str, list] = {}
    for name, ap in zip(tiers_of_pairs, aps):
        by_tier.setdefault(name, []).append(ap)
    return EvalReport(
        task="matching",
        map_overall=float(np.mean(aps)),
        map_by_tier={name: float(np.mean(v)) for name, v in by_tier.items()},
        num_queries=len(aps),
        num_skipped=skipped,
        config={"seed": seed, "dim": dset.dim},
    )


def eval_retrieval(dset: DescriptorSet, distractors_per_query: int = 50,
                   seed: int = 0) -> EvalReport:
    """Rank same-label patches against sampled distractors, per query patch."""
    labels = dset.labels
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ConfigError("retrieval needs >= 2 classes")
    rng = np.random.default_rng(seed)
    count_of = dict(zip(classes.tolist(), counts.tolist()))
    aps = []
    tiers_of_queries = []
    skipped = 0
    for q in range(len(dset)):
        if count_of[int(labels[q])] < 2:
            skipped += 1
            continue
        same = np.flatnonzero((labels == labels[q]))
        same = same[same != q]
        other = np.flatnonzero(labels != labels[q])
        take = min(distractors_per_query, len(other))
        distractors = rng.choice(other, size=take, replace=False) if take else other[:0]
        pool = np.concatenate([same, distractors])
        dist = np.linalg.norm(dset.descriptors[pool] - dset.descriptors[q], axis=1)
        rel = np.concatenate([np.ones(len(same)), np.zeros(len(distractors))])
        ranked = _ranked_relevance(dist, rel, pool)
        aps.append(average_precision(ranked))
        tiers_of_queries.append(_tier_of(dset, q))
    if not aps:
        raise ConfigError("retrieval: every class has a single patch")
    by_tier: dict[str, list] = {}
    for name, ap in zip(tiers_of_queries, aps):
        by_tier.setdefault(name, []).append(ap)
    return EvalReport(
        task="retrieval",
        map_overall=float(np.mean(aps)),
        map_by_tier={name: float(np.mean(v)) for name, v in by_tier.items()},
        num_queries=len(aps),
        num_skipped=skipped,
        config={"distractors_per_query": distractors_per_query, "seed": seed,
                "dim": dset.dim},
    )
