"""Active-learning driver: seed a labelled pool, then select, label, retrain.

Each seed starts from a random ``init_fraction`` of the selection units.
Every following batch re-renders predictions on the training frames with
the current field, rebuilds candidate statistics, picks new units with the
configured strategy, reveals their labels through a :class:`LabelOracle`
and retrains a fresh field on everything labelled so far.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import (RaySampleConfig, TrainConfig, TrainingDiverged, VoxelField,
                    field_for_dataset, render_frame_pred, train)
from .metrics import confusion, miou
from .regions import (Region, compute_stats, partition_frame, pixel_entropy, regions_of,
                      whole_frame_region)
from .scene import Dataset, SceneSpec, default_dataset, load_dataset
from .selection import (CandidatePool, DistanceConfig, SelectionLog, SelectionState,
                        normalize_distances, select_coreset, select_entropy, select_maxmin,
                        select_random)

log = logging.getLogger(__name__)

STRATEGIES = ("random", "entropy", "coreset", "maxmin")
GRANULARITIES = ("region", "image")


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    scene: SceneSpec = field(default_factory=SceneSpec)
    width: int = 80
    height: int = 60
    n_poses: int = 100
    strategy: str = "maxmin"
    use_feature: bool = True
    use_spatial: bool = True
    use_uncertainty: bool = True
    # False keeps u in raw nats inside d'
    normalize_uncertainty: bool = True
    granularity: str = "region"
    init_fraction: float = 0.05
    per_batch_fraction: float = 0.05
    n_batches: int = 4
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_regions: int = 48
    compactness: float = 10.0
    slic_iters: int = 10
    resolution: int = 64
    train: TrainConfig = field(default_factory=TrainConfig)
    ray: RaySampleConfig = field(default_factory=RaySampleConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        for name in ("init_fraction", "per_batch_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.n_batches < 1:
            raise ValueError("n_batches must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.strategy == "maxmin":
            DistanceConfig(self.use_feature, self.use_spatial, self.use_uncertainty)

    def distance_config(self) -> DistanceConfig:
        return DistanceConfig(self.use_feature, self.use_spatial, self.use_uncertainty)

    def nominal_budgets(self) -> list[float]:
        return [self.init_fraction + t * self.per_batch_fraction for t in range(self.n_batches)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_experiment_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset:
        return load_dataset(cfg.dataset)
    return default_dataset(cfg.scene, cfg.width, cfg.height, cfg.n_poses)


# --------------------------------------------------------------------------
# labels


class LabelOracle:
    """Ground-truth source for training labels; records every reveal."""

    def __init__(self, ds: Dataset):
        self._sem = [np.asarray(fr.sem) for fr in ds.train_frames]
        self.accesses: list[tuple[int, np.ndarray]] = []

    def reveal(self, frame_index: int, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels)
        self.accesses.append((frame_index, pixels.copy()))
        return self._sem[frame_index][pixels[:, 0], pixels[:, 1]].astype(np.int64)

    def revealed_mask(self, frame_index: int, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        for k, px in self.accesses:
            if k == frame_index:
                m[px[:, 0], px[:, 1]] = True
        return m


class SelectionUnits:
    """All selectable regions of the training frames under one global id space."""

    def __init__(self, ds: Dataset, granularity: str, n_regions: int = 48,
                 compactness: float = 10.0, slic_iters: int = 10):
        H, W = ds.intrinsics.height, ds.intrinsics.width
        self.height, self.width = H, W
        self.partitions = []
        self.regions: list[Region] = []
        self.frame_of: list[int] = []
        for k, fr in enumerate(ds.train_frames):
            if granularity == "image":
                regs = [whole_frame_region(fr.frame_id, H, W)]
                self.partitions.append(np.zeros((H, W), dtype=np.int64))
            else:
                part = partition_frame(fr.rgb, n_regions, compactness, slic_iters, fr.frame_id)
                regs = regions_of(part)
                self.partitions.append(part.labels)
            self.regions.extend(regs)
            self.frame_of.extend([k] * len(regs))
        self.frame_of = np.asarray(self.frame_of)
        self.pixel_counts = np.array([r.pixel_count for r in self.regions])
        self.total_pixels = len(ds.train_frames) * H * W

    def __len__(self) -> int:
        return len(self.regions)

    def labelled_fraction(self, ids) -> float:
        return float(self.pixel_counts[sorted(ids)].sum()) / self.total_pixels


def image_level_adapter(ds: Dataset) -> SelectionUnits:
    """Each training frame becomes a single selection unit."""
    return SelectionUnits(ds, "image")


def label_maps(units: SelectionUnits, ids, oracle: LabelOracle, n_frames: int) -> list[np.ndarray]:
    maps = [np.full((units.height, units.width), -1, dtype=np.int64) for _ in range(n_frames)]
    for i in sorted(ids):
        reg = units.regions[i]
        k = int(units.frame_of[i])
        maps[k][reg.pixels[:, 0], reg.pixels[:, 1]] = oracle.reveal(k, reg.pixels)
    return maps


def candidate_pool(units: SelectionUnits, f: VoxelField, ds: Dataset,
                   ray_cfg: RaySampleConfig, entropy_maps: list | None = None) -> CandidatePool:
    """Render every training frame with ``f`` and summarise each unit.

    Per-pixel entropy maps are appended to ``entropy_maps`` when given.
    """
    u, feats, cents = [], [], []
    start = 0
    for k, fr in enumerate(ds.train_frames):
        pred = render_frame_pred(f, fr.pose, fr.intrinsics, ray_cfg)
        n = int(np.sum(units.frame_of == k))
        regs = units.regions[start:start + n]
        compute_stats(regs, pred.probs, pred.logits, pred.depth, fr.pose, fr.intrinsics)
        if entropy_maps is not None:
            entropy_maps.append(pixel_entropy(pred.probs).astype(np.float32))
        for r in regs:
            u.append(r.mean_entropy)
            feats.append(r.feature)
            cents.append(r.centroid3d)
        start += n
    return CandidatePool(np.arange(len(units)), u, feats, cents)


def evaluate(f: VoxelField, ds: Dataset, ray_cfg: RaySampleConfig):
    preds = [render_frame_pred(f, fr.pose, fr.intrinsics, ray_cfg).sem for fr in ds.test_frames]
    cm = confusion(preds, [fr.sem for fr in ds.test_frames], ds.class_count)
    m, per_class = miou(cm)
    return m, per_class, cm


# --------------------------------------------------------------------------
# results


@dataclass
class BatchRecord:
    seed: int
    batch: int
    budget: float
    labelled_fraction: float
    miou: float
    per_class: list
    wall_seconds: float
    selected: list
    n_labelled: int


@dataclass
class ExperimentResult:
    strategy: str
    granularity: str
    config: dict
    records: list = field(default_factory=list)
    selection_log: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    # (seed, batch) -> (frames, H, W) entropy of the model that chose that batch
    uncertainty: dict = field(default_factory=dict)

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.records})

    def curve(self):
        """``(budgets, mean, std)`` over completed seeds, one entry per batch."""
        batches = sorted({r.batch for r in self.records})
        budgets, mean, std = [], [], []
        for b in batches:
            rows = [r for r in self.records if r.batch == b and r.seed not in self.failures]
            vals = np.array([r.miou for r in rows])
            budgets.append(rows[0].budget)
            mean.append(float(vals.mean()))
            std.append(float(vals.std()))
        return np.array(budgets), np.array(mean), np.array(std)

    def per_seed_curve(self, seed: int):
        rows = sorted((r for r in self.records if r.seed == seed), key=lambda r: r.batch)
        return np.array([r.budget for r in rows]), np.array([r.miou for r in rows])


class InitCache:
    """Batch-0 training shared by every strategy of one seed."""

    def __init__(self):
        self._store = {}

    def get(self, key):
        return self._store.get(key)

    def put(self, key, value):
        self._store[key] = value


def run_experiment(cfg: ExperimentConfig, ds: Dataset | None = None,
                   oracle: LabelOracle | None = None, cache: InitCache | None = None,
                   units: SelectionUnits | None = None) -> ExperimentResult:
    ds = ds if ds is not None else load_experiment_dataset(cfg)
    units = units if units is not None else SelectionUnits(
        ds, cfg.granularity, cfg.n_regions, cfg.compactness, cfg.slic_iters)
    result = ExperimentResult(cfg.strategy, cfg.granularity, cfg.to_dict())
    budgets = cfg.nominal_budgets()
    n_units = len(units)
    n_init = max(1, int(round(cfg.init_fraction * n_units)))
    per_batch = max(1, int(round(cfg.per_batch_fraction * n_units)))
    if n_init + per_batch * (cfg.n_batches - 1) > n_units:
        raise ValueError("batch schedule exceeds the number of selection units")
    for seed in cfg.seeds:
        try:
            _run_seed(cfg, ds, units, seed, n_init, per_batch, budgets, result,
                      oracle if oracle is not None else LabelOracle(ds), cache)
        except TrainingDiverged as exc:
            log.warning("seed %d diverged: %s", seed, exc)
            result.failures[int(seed)] = str(exc)
    return result


def _fit(cfg, ds, labels, seed, batch):
    f = field_for_dataset(ds, (cfg.resolution,) * 3)
    tcfg = dataclasses.replace(cfg.train, seed=derive_seed(seed, batch))
    f, _ = train(f, ds, labels, tcfg, cfg.ray)
    return f


def _run_seed(cfg, ds, units, seed, n_init, per_batch, budgets, result, oracle, cache):
    n_frames = len(ds.train_frames)
    all_ids = set(range(len(units)))
    rng = np.random.default_rng(derive_seed(seed, 0, 0))
    init = sorted(int(i) for i in rng.choice(len(units), size=n_init, replace=False))
    state = SelectionState(set(init), all_ids - set(init), 0)

    t0 = time.perf_counter()
    key = (int(seed), cfg.granularity, tuple(init))
    hit = cache.get(key) if cache is not None else None
    if hit is None:
        f = _fit(cfg, ds, label_maps(units, state.labelled, oracle, n_frames), seed, 0)
        m, per_class, _ = evaluate(f, ds, cfg.ray)
        if cache is not None:
            cache.put(key, (f, m, per_class, time.perf_counter() - t0))
    else:
        f, m, per_class, _ = hit
        # labels still flow through the oracle so access logs stay complete
        label_maps(units, state.labelled, oracle, n_frames)
    result.selection_log.extend(
        {"seed": int(seed), "batch": 0, "pick_index": i, "region_id": r, "score": None,
         "strategy": "init"} for i, r in enumerate(init))
    result.records.append(BatchRecord(int(seed), 0, budgets[0], units.labelled_fraction(state.labelled),
                                      m, per_class.tolist(), time.perf_counter() - t0, init,
                                      len(state.labelled)))

    for t in range(1, cfg.n_batches):
        t0 = time.perf_counter()
        batch = _select(cfg, state, units, f, ds, per_batch, seed, t, result)
        state = state.commit(batch)
        f = _fit(cfg, ds, label_maps(units, state.labelled, oracle, n_frames), seed, t)
        m, per_class, _ = evaluate(f, ds, cfg.ray)
        result.records.append(BatchRecord(int(seed), t, budgets[t], units.labelled_fraction(state.labelled),
                                          m, per_class.tolist(), time.perf_counter() - t0,
                                          sorted(batch), len(state.labelled)))


def _select(cfg, state, units, f, ds, K, seed, t, result):
    sel_seed = derive_seed(seed, t, 1)
    maps: list = []
    pool = candidate_pool(units, f, ds, cfg.ray, maps)
    result.uncertainty[(int(seed), t)] = np.stack(maps)
    if cfg.strategy == "random":
        batch = select_random(state, K, sel_seed)
        result.selection_log.extend(
            {"seed": int(seed), "batch": t, "pick_index": i, "region_id": r, "score": None,
             "strategy": "random"} for i, r in enumerate(batch))
        return batch
    if cfg.strategy == "entropy":
        batch = select_entropy(state, pool, K)
        result.selection_log.extend(
            {"seed": int(seed), "batch": t, "pick_index": i, "region_id": r,
             "score": float(pool.u[r]), "strategy": "entropy", "u": float(pool.u[r])}
            for i, r in enumerate(batch))
        return batch
    stats = normalize_distances(pool, sel_seed)
    if not cfg.normalize_uncertainty:
        stats = dataclasses.replace(stats, u_min=0.0, u_max=math.inf)
    slog = SelectionLog()
    st = SelectionState(state.labelled, state.unlabelled, t)
    if cfg.strategy == "coreset":
        batch = select_coreset(st, pool, K, DistanceConfig(True, False, False, stats), sel_seed, slog)
    else:
        batch = select_maxmin(st, pool, K, cfg.distance_config().with_stats(stats), sel_seed, slog)
    for rec in slog.records:
        rec["seed"] = int(seed)
    result.selection_log.extend(slog.records)
    return batch


# --------------------------------------------------------------------------
# budget comparison and output files


def budget_to_reach(method, random, target_budget: float):
    """Smallest budget at which ``method`` matches random's mIoU at ``target_budget``.

    Both arguments are ``(budgets, mean_miou)`` pairs on the same grid.
    The method curve is interpolated linearly between measured budgets.
    Returns ``None`` when the method never reaches the target.
    """
    mb, mm = (np.asarray(a, dtype=np.float64) for a in method)
    rb, rm = (np.asarray(a, dtype=np.float64) for a in random)
    if mb.shape != rb.shape or not np.allclose(mb, rb, rtol=0, atol=1e-12):
        raise ValueError("mismatched budget grids")
    hit = np.flatnonzero(np.isclose(rb, target_budget, rtol=0, atol=1e-12))
    if len(hit) == 0:
        raise ValueError("target budget not on the random curve's grid")
    target = rm[hit[0]]
    if mm[0] >= target:
        return float(mb[0])
    for i in range(1, len(mb)):
        if mm[i] >= target:
            a, b = mm[i - 1], mm[i]
            return float(mb[i - 1] + (target - a) / (b - a) * (mb[i] - mb[i - 1]))
    return None


RESULT_COLUMNS = ["strategy", "seed", "batch", "labelled_fraction", "miou", "wall_seconds"]
SUMMARY_COLUMNS = ["strategy", "batch", "budget", "labelled_fraction_mean", "miou_mean",
                   "miou_std", "n_seeds"]


def write_results_csv(path, results: list[ExperimentResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for res in results:
            for r in sorted(res.records, key=lambda r: (r.seed, r.batch)):
                w.writerow([res_label(res), r.seed, r.batch, repr(r.labelled_fraction),
                            repr(r.miou), f"{r.wall_seconds:.3f}"])


def res_label(res: ExperimentResult) -> str:
    return res.strategy if res.granularity == "region" else f"{res.strategy}-image"


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and population std of mIoU per (strategy, batch)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["strategy"], int(r["batch"])), []).append(r)
    out = []
    for (strat, b), grp in sorted(groups.items()):
        vals = np.array([float(r["miou"]) for r in grp])
        fr = np.array([float(r["labelled_fraction"]) for r in grp])
        out.append({"strategy": strat, "batch": b, "budget": grp[0].get("budget", ""),
                    "labelled_fraction_mean": repr(float(fr.mean())),
                    "miou_mean": repr(float(vals.mean())), "miou_std": repr(float(vals.std())),
                    "n_seeds": len(grp)})
    return out


def write_summary_csv(path, results: list[ExperimentResult]) -> None:
    rows = []
    for res in results:
        for r in res.records:
            if r.seed in res.failures:
                continue
            rows.append({"strategy": res_label(res), "batch": r.batch, "budget": repr(r.budget),
                         "labelled_fraction": r.labelled_fraction, "miou": r.miou})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        w.writerows(summarize(rows))


def write_selection_log(path, results: list[ExperimentResult]) -> None:
    with open(path, "w") as fh:
        for res in results:
            for rec in res.selection_log:
                fh.write(json.dumps({**rec, "granularity": res.granularity, "run": res_label(res)},
                                    sort_keys=True) + "\n")


def write_units(path, units: SelectionUnits, ds: Dataset) -> None:
    """Map of global region ids to (frame index, frame id, local region id)."""
    rows = []
    for gid, reg in enumerate(units.regions):
        k = int(units.frame_of[gid])
        rows.append([k, int(ds.train_frames[k].frame_id), int(reg.region_id)])
    Path(path).write_text(json.dumps({"height": units.height, "width": units.width,
                                      "regions": rows}))


def write_failures(path, results: list[ExperimentResult]) -> None:
    data = {res_label(res): {str(k): v for k, v in res.failures.items()} for res in results}
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))
