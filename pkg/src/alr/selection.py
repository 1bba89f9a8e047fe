"""Batch acquisition strategies.

Candidates are regions summarised by an uncertainty ``u`` (mean entropy), a
feature vector (mean composited logits) and a 3D centroid. The hybrid
strategy greedily solves a max-min diversification problem over the
augmented distance ``d'(x, y) = (u(x) + u(y)) / 2 + d(x, y)``, where ``d``
sums the enabled, min-max normalised feature and spatial distances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .regions import pixel_entropy

MAX_NORM_PAIRS = 200_000


class SelectionError(ValueError):
    pass


@dataclass
class Candidate:
    region_id: int
    u: float
    feature: np.ndarray
    centroid: np.ndarray


class CandidatePool:
    """Column storage for candidates, ordered by region id."""

    def __init__(self, ids, u, features, centroids):
        ids = np.asarray(ids, dtype=np.int64)
        order = np.argsort(ids, kind="stable")
        self.ids = ids[order]
        if len(np.unique(self.ids)) != len(self.ids):
            raise SelectionError("duplicate region ids in candidate pool")
        self.u = np.asarray(u, dtype=np.float64)[order]
        self.features = np.atleast_2d(np.asarray(features, dtype=np.float64))[order]
        self.centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))[order]
        if np.any(self.u < 0):
            raise SelectionError("uncertainties must be non-negative")
        for name, a in (("u", self.u), ("features", self.features), ("centroids", self.centroids)):
            if not np.all(np.isfinite(a)):
                raise SelectionError(f"non-finite {name}")

    @classmethod
    def from_candidates(cls, cands: Iterable[Candidate]) -> "CandidatePool":
        cands = list(cands)
        return cls([c.region_id for c in cands], [c.u for c in cands],
                   [np.asarray(c.feature, dtype=np.float64) for c in cands],
                   [np.asarray(c.centroid, dtype=np.float64) for c in cands])

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, region_ids) -> np.ndarray:
        region_ids = np.asarray(list(region_ids), dtype=np.int64)
        pos = np.searchsorted(self.ids, region_ids)
        if len(region_ids) and (np.any(pos >= len(self.ids)) or np.any(self.ids[np.minimum(pos, len(self.ids) - 1)] != region_ids)):
            raise SelectionError("region id not in candidate pool")
        return pos

    def candidate(self, i: int) -> Candidate:
        return Candidate(int(self.ids[i]), float(self.u[i]), self.features[i], self.centroids[i])


def as_pool(candidates) -> CandidatePool:
    if isinstance(candidates, CandidatePool):
        return candidates
    return CandidatePool.from_candidates(candidates)


@dataclass
class SelectionState:
    labelled: set
    unlabelled: set
    batch: int = 0

    def __post_init__(self):
        self.labelled = set(int(i) for i in self.labelled)
        self.unlabelled = set(int(i) for i in self.unlabelled)
        if self.labelled & self.unlabelled:
            raise SelectionError("labelled and unlabelled sets overlap")

    def commit(self, batch: Sequence[int]) -> "SelectionState":
        b = set(int(i) for i in batch)
        if not b <= self.unlabelled:
            raise SelectionError("batch contains regions outside the unlabelled pool")
        return SelectionState(self.labelled | b, self.unlabelled - b, self.batch + 1)


# --------------------------------------------------------------------------
# distances


@dataclass
class NormStats:
    u_min: float = 0.0
    u_max: float = 1.0
    f_min: float = 0.0
    f_max: float = 1.0
    s_min: float = 0.0
    s_max: float = 1.0

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(0.0, 1.0, 0.0, np.inf, 0.0, np.inf)


@dataclass
class DistanceConfig:
    use_feature: bool = True
    use_spatial: bool = True
    use_uncertainty: bool = True
    stats: NormStats | None = None

    def __post_init__(self):
        if not (self.use_feature or self.use_spatial or self.use_uncertainty):
            raise SelectionError("at least one distance term must be enabled")
        s = self.stats
        if s is not None and (s.u_max < s.u_min or s.f_max < s.f_min or s.s_max < s.s_min):
            raise SelectionError("normalisation max must be >= min")

    def with_stats(self, stats: NormStats) -> "DistanceConfig":
        return DistanceConfig(self.use_feature, self.use_spatial, self.use_uncertainty, stats)

    def terms(self) -> list[str]:
        return [name for name, on in (("u", self.use_uncertainty), ("d_f", self.use_feature),
                                      ("d_s", self.use_spatial)) if on]


def normalize_distances(candidates, seed: int = 0, max_pairs: int = MAX_NORM_PAIRS) -> NormStats:
    """Min-max statistics for ``u``, ``d_f`` and ``d_s`` over the pool.

    ``u`` uses every candidate. Pair distances use all pairs, or a seeded
    sample of ``max_pairs`` pairs on large pools. Their lower end is 0, the
    self-distance, so rescaling keeps each term a metric.
    """
    pool = as_pool(candidates)
    n = len(pool)
    if n < 2:
        raise SelectionError("need at least two candidates to normalise")
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=max_pairs)
        j = (i + rng.integers(1, n, size=max_pairs)) % n
    d_f = np.sqrt(((pool.features[i] - pool.features[j]) ** 2).sum(axis=1))
    d_s = np.sqrt(((pool.centroids[i] - pool.centroids[j]) ** 2).sum(axis=1))
    return NormStats(float(pool.u.min()), float(pool.u.max()),
                     0.0, float(d_f.max()), 0.0, float(d_s.max()))


def _scale(v, lo, hi):
    if not hi > lo:
        return np.zeros_like(v)
    if np.isinf(hi):
        return v - lo
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def normalized_u(pool: CandidatePool, cfg: DistanceConfig) -> np.ndarray:
    if not cfg.use_uncertainty:
        return np.zeros(len(pool))
    s = cfg.stats
    return _scale(pool.u, s.u_min, s.u_max)


def _term_rows(pool: CandidatePool, j: int, targets: np.ndarray, cfg: DistanceConfig):
    """Normalised feature and spatial distances from candidate ``j`` to ``targets``."""
    s = cfg.stats
    d_f = d_s = None
    if cfg.use_feature:
        raw = np.sqrt(((pool.features[targets] - pool.features[j]) ** 2).sum(axis=1))
        d_f = _scale(raw, s.f_min, s.f_max)
    if cfg.use_spatial:
        raw = np.sqrt(((pool.centroids[targets] - pool.centroids[j]) ** 2).sum(axis=1))
        d_s = _scale(raw, s.s_min, s.s_max)
    return d_f, d_s


def _augmented_row(pool, j, targets, cfg, un):
    d_f, d_s = _term_rows(pool, j, targets, cfg)
    d = np.zeros(len(targets))
    if d_f is not None:
        d = d + d_f
    if d_s is not None:
        d = d + d_s
    return 0.5 * (un[targets] + un[j]) + d, d_f, d_s


def _require_stats(cfg: DistanceConfig):
    if cfg.stats is None:
        raise SelectionError("distance config has no normalisation stats")


def distance(x: Candidate, y: Candidate, cfg: DistanceConfig) -> float:
    """Sum of the enabled, normalised feature and spatial distances."""
    _require_stats(cfg)
    pool = CandidatePool([0, 1], [x.u, y.u], [x.feature, y.feature], [x.centroid, y.centroid])
    d_f, d_s = _term_rows(pool, 0, np.array([1]), cfg)
    return float((d_f[0] if d_f is not None else 0.0) + (d_s[0] if d_s is not None else 0.0))


def augmented_distance(x: Candidate, y: Candidate, cfg: DistanceConfig) -> float:
    _require_stats(cfg)
    pool = CandidatePool([0, 1], [x.u, y.u], [x.feature, y.feature], [x.centroid, y.centroid])
    un = normalized_u(pool, cfg)
    return float(0.5 * (un[0] + un[1]) + distance(x, y, cfg))


def set_objective(batch, cfg: DistanceConfig) -> float:
    """min over the batch of u plus min over its pairs of d (normalised terms)."""
    _require_stats(cfg)
    pool = as_pool(batch)
    n = len(pool)
    if n < 2:
        raise SelectionError("batch too small: need at least two members")
    un = normalized_u(pool, cfg)
    best = np.inf
    for j in range(n - 1):
        targets = np.arange(j + 1, n)
        d_f, d_s = _term_rows(pool, j, targets, cfg)
        d = np.zeros(len(targets))
        if d_f is not None:
            d = d + d_f
        if d_s is not None:
            d = d + d_s
        best = min(best, float(d.min()))
    return float(un.min()) + best


def exhaustive_best(candidates, K: int, cfg: DistanceConfig) -> tuple[float, tuple]:
    """Brute-force optimum of :func:`set_objective` over all K-subsets."""
    pool = as_pool(candidates)
    best, arg = -np.inf, ()
    for combo in itertools.combinations(range(len(pool)), K):
        sub = CandidatePool(pool.ids[list(combo)], pool.u[list(combo)],
                            pool.features[list(combo)], pool.centroids[list(combo)])
        val = set_objective(sub, cfg)
        if val > best:
            best, arg = val, tuple(int(pool.ids[c]) for c in combo)
    return best, arg


# --------------------------------------------------------------------------
# strategies


@dataclass
class SelectionLog:
    records: list = field(default_factory=list)
    evaluations: int = 0


def _check_pool(state: SelectionState, K: int):
    if K < 1:
        raise SelectionError("batch size must be >= 1")
    if K > len(state.unlabelled):
        raise SelectionError(f"batch exceeds pool: K={K} > |U|={len(state.unlabelled)}")


def _prepare(state, candidates, cfg, seed):
    pool = as_pool(candidates)
    if cfg.stats is None:
        cfg = cfg.with_stats(normalize_distances(pool, seed))
    U = pool.index(sorted(state.unlabelled))
    L = pool.index(sorted(state.labelled & set(pool.ids.tolist())))
    return pool, cfg, U, L


def _record(log, state, k, pool, i, score, un, cfg, strategy, nn_terms):
    if log is None:
        return
    rec = {"batch": state.batch, "pick_index": k, "region_id": int(pool.ids[i]),
           "score": float(score), "strategy": strategy}
    if cfg.use_uncertainty:
        rec["u"] = float(un[i])
    if nn_terms is not None:
        d_f, d_s = nn_terms
        if cfg.use_feature and d_f is not None:
            rec["d_f"] = float(d_f)
        if cfg.use_spatial and d_s is not None:
            rec["d_s"] = float(d_s)
    log.records.append(rec)


def select_maxmin(state: SelectionState, candidates, K: int, cfg: DistanceConfig,
                  seed: int = 0, log: SelectionLog | None = None,
                  strategy: str = "maxmin") -> list[int]:
    """Greedy max-min diversification over ``d'``.

    Each unlabelled candidate keeps its running minimum ``d'`` to the
    labelled set plus the picks so far; every pick costs one pass over the
    remaining pool. Ties go to the lowest region id. With an empty labelled
    set the first pick is the most uncertain candidate.
    """
    _check_pool(state, K)
    pool, cfg, U, L = _prepare(state, candidates, cfg, seed)
    un = normalized_u(pool, cfg)
    n_u = len(U)
    best = np.full(n_u, np.inf)
    nn_f = np.full(n_u, np.nan)
    nn_s = np.full(n_u, np.nan)
    evals = 0

    def absorb(j, active):
        nonlocal evals
        row, d_f, d_s = _augmented_row(pool, j, U[active], cfg, un)
        evals += len(active)
        better = row < best[active]
        upd = active[better]
        best[upd] = row[better]
        if d_f is not None:
            nn_f[upd] = d_f[better]
        if d_s is not None:
            nn_s[upd] = d_s[better]

    active = np.arange(n_u)
    for j in L:
        absorb(j, active)

    picks = []
    remaining = np.ones(n_u, dtype=bool)
    for k in range(K):
        idx = np.flatnonzero(remaining)
        if np.isinf(best[idx]).all():
            # cold start: nothing to measure against yet
            key = un[U[idx]]
            pos = idx[int(np.argmax(key))]
            score, terms = un[U[pos]], None
        else:
            pos = idx[int(np.argmax(best[idx]))]
            score = best[pos]
            terms = (None if np.isnan(nn_f[pos]) else nn_f[pos],
                     None if np.isnan(nn_s[pos]) else nn_s[pos])
        picks.append(int(pool.ids[U[pos]]))
        _record(log, state, k, pool, U[pos], score, un, cfg, strategy, terms)
        remaining[pos] = False
        if k + 1 < K:
            absorb(U[pos], np.flatnonzero(remaining))
    if log is not None:
        log.evaluations += evals
    return picks


def select_maxmin_naive(state: SelectionState, candidates, K: int, cfg: DistanceConfig,
                        seed: int = 0) -> list[int]:
    """Reference greedy that recomputes every minimum from scratch per pick."""
    _check_pool(state, K)
    pool, cfg, U, L = _prepare(state, candidates, cfg, seed)
    un = normalized_u(pool, cfg)
    chosen: list[int] = []
    remaining = list(U)
    for _ in range(K):
        anchors = list(L) + chosen
        if not anchors:
            pick = max(remaining, key=lambda i: (un[i], -pool.ids[i]))
        else:
            targets = np.asarray(remaining)
            mins = np.full(len(targets), np.inf)
            for j in anchors:
                row, _, _ = _augmented_row(pool, j, targets, cfg, un)
                mins = np.minimum(mins, row)
            pick = int(targets[int(np.argmax(mins))])
        chosen.append(pick)
        remaining.remove(pick)
    return [int(pool.ids[i]) for i in chosen]


def select_random(state: SelectionState, K: int, seed: int) -> list[int]:
    _check_pool(state, K)
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(np.array(sorted(state.unlabelled)), size=K, replace=False)]


def select_entropy(state: SelectionState, candidates, K: int) -> list[int]:
    """Top-K raw uncertainty, lowest region id first on ties."""
    _check_pool(state, K)
    pool = as_pool(candidates)
    U = pool.index(sorted(state.unlabelled))
    order = np.lexsort((pool.ids[U], -pool.u[U]))
    return [int(pool.ids[U[i]]) for i in order[:K]]


def select_coreset(state: SelectionState, candidates, K: int, cfg: DistanceConfig | None = None,
                   seed: int = 0, log: SelectionLog | None = None) -> list[int]:
    """k-Center greedy on feature distance only."""
    if not state.labelled:
        raise SelectionError("coreset selection needs a non-empty labelled set")
    stats = cfg.stats if cfg is not None else None
    fcfg = DistanceConfig(use_feature=True, use_spatial=False, use_uncertainty=False, stats=stats)
    return select_maxmin(state, candidates, K, fcfg, seed, log, strategy="coreset")


__all__ = [
    "Candidate", "CandidatePool", "SelectionState", "NormStats", "DistanceConfig",
    "SelectionLog", "SelectionError", "pixel_entropy", "normalize_distances", "distance",
    "augmented_distance", "set_objective", "exhaustive_best", "select_maxmin",
    "select_maxmin_naive", "select_random", "select_entropy", "select_coreset",
]
