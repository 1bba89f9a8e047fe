"""Command-line entry point.

Every subcommand reads one JSON config whose schema mirrors
:class:`~alr.loop.ExperimentConfig` (with nested ``scene``, ``train`` and
``ray`` sections) plus a ``strategies`` list, then applies ``--key value``
overrides. Nested keys use dots, e.g. ``--train.iterations 500``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .field import (RaySampleConfig, TrainConfig, TrainingDiverged, field_for_dataset,
                    full_labels, load_field, save_field, train)
from .loop import (ExperimentConfig, InitCache, SelectionUnits, budget_to_reach, evaluate,
                   load_experiment_dataset, res_label, run_experiment, write_failures,
                   write_results_csv, write_selection_log, write_summary_csv, write_units)
from .metrics import write_iou_csv
from .scene import SceneSpec, save_dataset
from .regions import Partition

log = logging.getLogger("alr")

# numba complains about an old TBB even though it falls back to another layer
warnings.filterwarnings("ignore", message="The TBB threading layer")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config schema


def default_config() -> dict:
    d = dataclasses.asdict(ExperimentConfig())
    d["scene"]["palette"] = None
    d["scene"]["room_extent"] = list(d["scene"]["room_extent"])
    d["scene"]["object_size_range"] = list(d["scene"]["object_size_range"])
    d["strategies"] = ["random", "maxmin"]
    return d


def _coerce(value, default, key):
    """Check (and convert) one JSON value against the schema default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default:
            return [_coerce(v, default[0], f"{key}[]") for v in value]
        return value
    if default is None:
        # optional fields: a path (dataset) or a nested list (palette)
        if value is None or isinstance(value, (str, list)):
            return value
        raise ConfigError(f"{key}: expected a string, list or null, got {value!r}")
    raise ConfigError(f"{key}: unsupported schema type")


def merge_config(base: dict, update: dict, prefix: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        key = prefix + k
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key}: expected an object")
            out[k] = merge_config(base[k], v, key + ".")
        else:
            out[k] = _coerce(v, base[k], key)
    return out


def _parse_token(text: str, default):
    if isinstance(default, str) or (default is None and not text.startswith(("[", "null"))):
        return text
    if isinstance(default, list) and not text.startswith("["):
        elem = default[0] if default else ""
        return [_parse_token(t, elem) for t in text.split(",") if t != ""]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise ConfigError(f"cannot parse value {text!r}") from None


def apply_overrides(cfg: dict, tokens: list[str]) -> dict:
    if len(tokens) % 2:
        raise ConfigError(f"overrides must come as --key value pairs: {tokens}")
    for flag, text in zip(tokens[::2], tokens[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key, got {flag!r}")
        path = flag[2:].replace("-", "_").split(".")
        node = cfg
        for part in path[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {flag[2:]!r}")
            node = node[part]
        leaf = path[-1]
        if leaf not in node or isinstance(node[leaf], dict):
            raise ConfigError(f"unknown config key {flag[2:]!r}")
        node[leaf] = _coerce(_parse_token(text, node[leaf]), node[leaf], flag[2:])
    return cfg


def build_experiment(cfg: dict, strategy: str | None = None) -> ExperimentConfig:
    sc = dict(cfg["scene"])
    sc["room_extent"] = tuple(sc["room_extent"])
    sc["object_size_range"] = tuple(sc["object_size_range"])
    flat = {k: v for k, v in cfg.items() if k not in ("scene", "train", "ray", "strategies")}
    if strategy is not None:
        flat["strategy"] = strategy
    try:
        return ExperimentConfig(scene=SceneSpec(**sc), train=TrainConfig(**cfg["train"]),
                                ray=RaySampleConfig(**cfg["ray"]), **flat)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def write_config_echo(out: Path, cfg: dict, command: str) -> None:
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=1))


# --------------------------------------------------------------------------
# commands


def cmd_gen_scene(cfg: dict, out: Path) -> int:
    exp = build_experiment(cfg)
    ds = load_experiment_dataset(dataclasses.replace(exp, dataset=None))
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_config_echo(out, cfg, "gen-scene")
    frames = ds.train_frames + ds.test_frames
    hist = np.zeros(ds.class_count, dtype=np.int64)
    for fr in frames:
        hist += np.bincount(fr.sem.ravel(), minlength=ds.class_count)
    K = ds.intrinsics
    print(f"frames: {len(ds.train_frames)} train, {len(ds.test_frames)} test")
    print(f"classes: {ds.class_count}")
    print(f"pixels: {len(frames) * K.width * K.height} ({K.width}x{K.height} per frame)")
    print("class histogram:")
    for c, (name, n) in enumerate(zip(ds.class_names, hist)):
        print(f"  {c} {name} {int(n)}")
    return 0


def cmd_train_full(cfg: dict, out: Path, checkpoint: str | None = None) -> int:
    exp = build_experiment(cfg)
    ds = load_experiment_dataset(exp)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(out, cfg, "train-full")
    if checkpoint:
        f = load_field(checkpoint)
    else:
        f = field_for_dataset(ds, (exp.resolution,) * 3)
        try:
            f, hist = train(f, ds, full_labels(ds), exp.train, exp.ray)
        except TrainingDiverged as exc:
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return 1
        save_field(f, out / "field.bin")
        hist.write_csv(out / "loss.csv")
        # evaluate exactly what was written, so checkpoint reloads agree
        f = load_field(out / "field.bin")
    m, per_class, cm = evaluate(f, ds, exp.ray)
    write_iou_csv(out / "iou.csv", cm, ds.class_names)
    (out / "metrics.json").write_text(json.dumps({"miou": m}, indent=1))
    print(f"test mIoU: {m:.6f}")
    return 0


def cmd_run_al(cfg: dict, out: Path) -> int:
    strategies = cfg["strategies"]
    if not strategies:
        raise ConfigError("strategies must be non-empty")
    exps = [build_experiment(cfg, s) for s in strategies]
    ds = load_experiment_dataset(exps[0])
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(out, cfg, "run-al")
    e0 = exps[0]
    units = SelectionUnits(ds, e0.granularity, e0.n_regions, e0.compactness, e0.slic_iters)
    cache = InitCache()
    results = []
    for exp in exps:
        res = run_experiment(exp, ds, cache=cache, units=units)
        results.append(res)
        for (seed, t), maps in sorted(res.uncertainty.items()):
            name = f"uncertainty_{res_label(res)}_s{seed}_b{t}.bin"
            (out / name).write_bytes(np.ascontiguousarray(maps, dtype="<f4").tobytes())
    write_results_csv(out / "results.csv", results)
    write_summary_csv(out / "summary.csv", results)
    write_selection_log(out / "selection.jsonl", results)
    write_failures(out / "failures.json", results)
    write_units(out / "units.json", units, ds)
    for k, fr in enumerate(ds.train_frames):
        Partition(fr.frame_id, units.partitions[k]).save(out / f"regions_{fr.frame_id:05d}.bin")

    with open(out / "results.csv") as fh:
        n_rows = sum(1 for _ in fh) - 1
    expected = sum(len(r.records) for r in results)
    if n_rows != expected:
        print("error: results file incomplete", file=sys.stderr)
        return 1
    for row in csv.DictReader(open(out / "summary.csv")):
        print(f"{row['strategy']:>14} batch {row['batch']} budget {float(row['budget']):.2%} "
              f"mIoU {float(row['miou_mean']):.4f} +- {float(row['miou_std']):.4f}")
    failed = {res_label(r): sorted(r.failures) for r in results if r.failures}
    if failed:
        print(f"error: diverged seeds: {failed}", file=sys.stderr)
        return 1
    return 0


def read_summary(results_dir: Path) -> dict:
    path = results_dir / "summary.csv"
    if not path.exists():
        raise ConfigError(f"missing results: {path}")
    curves: dict = {}
    for row in csv.DictReader(open(path)):
        c = curves.setdefault(row["strategy"], ([], [], []))
        c[0].append(float(row["budget"]))
        c[1].append(float(row["miou_mean"]))
        c[2].append(float(row["miou_std"]))
    if not curves:
        raise ConfigError(f"incomplete results: {path} has no rows")
    return {k: tuple(np.array(a) for a in v) for k, v in curves.items()}


def budget_table(curves: dict, target_budget: float | None = None):
    if "random" not in curves:
        raise ConfigError("report needs a 'random' strategy as reference")
    rb, rm, _ = curves["random"]
    target = float(rb[-1]) if target_budget is None else float(target_budget)
    rows = []
    for name in sorted(curves, key=lambda s: (s != "random", s)):
        b, m, _ = curves[name]
        rows.append((name, budget_to_reach((b, m), (rb, rm), target)))
    return target, rows


def learning_curve_svg(curves: dict, width: int = 640, height: int = 420) -> str:
    """Mean mIoU against budget per strategy with +-1 std error bars."""
    pad_l, pad_r, pad_t, pad_b = 60, 150, 20, 50
    all_b = np.concatenate([c[0] for c in curves.values()])
    lo_y = min(float(np.min(c[1] - c[2])) for c in curves.values())
    hi_y = max(float(np.max(c[1] + c[2])) for c in curves.values())
    x0, x1 = float(all_b.min()), float(all_b.max())
    if x1 == x0:
        x0, x1 = x0 - 0.01, x1 + 0.01
    y0, y1 = max(0.0, lo_y - 0.05), min(1.0, hi_y + 0.05)
    if y1 <= y0:
        y0, y1 = 0.0, 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return pad_t + (1 - (v - y0) / (y1 - y0)) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
             f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>']
    for b in sorted(set(np.round(all_b, 6))):
        parts.append(f'<text x="{sx(b):.1f}" y="{pad_t + ph + 18}" font-size="11" '
                     f'text-anchor="middle">{b:.0%}</text>')
    for k in range(6):
        v = y0 + k * (y1 - y0) / 5
        parts.append(f'<text x="{pad_l - 6}" y="{sy(v) + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{v:.2f}</text>')
    parts.append(f'<text x="{pad_l + pw / 2}" y="{height - 10}" font-size="12" '
                 f'text-anchor="middle">labelled budget</text>')
    parts.append(f'<text x="14" y="{pad_t + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {pad_t + ph / 2})">test mIoU</text>')
    for i, (name, (b, m, s)) in enumerate(sorted(curves.items())):
        col = colors[i % len(colors)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(b, m))
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{pts}"/>')
        for x, y, e in zip(b, m, s):
            parts.append(f'<line x1="{sx(x):.1f}" y1="{sy(y - e):.1f}" x2="{sx(x):.1f}" '
                         f'y2="{sy(y + e):.1f}" stroke="{col}"/>')
        ly = pad_t + 16 + 18 * i
        parts.append(f'<line x1="{pad_l + pw + 12}" y1="{ly}" x2="{pad_l + pw + 32}" y2="{ly}" '
                     f'stroke="{col}" stroke-width="2"/>')
        parts.append(f'<text x="{pad_l + pw + 38}" y="{ly + 4}" font-size="12">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(results_dir: Path, target_budget: float | None = None) -> int:
    curves = read_summary(results_dir)
    target, rows = budget_table(curves, target_budget)
    with open(results_dir / "budget_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "budget_to_reach"])
        for name, b in rows:
            w.writerow([name, "not reached" if b is None else f"{100 * b:.2f}%"])
    (results_dir / "learning_curves.svg").write_text(learning_curve_svg(curves))
    print(f"target: random mIoU at {target:.2%}")
    for name, b in rows:
        print(f"{name:>14} {'not reached' if b is None else f'{b:.2%}'}")
    return 0


# ------------------------------------------------------------------ overlays


def boundary_mask(labels: np.ndarray, selected) -> np.ndarray:
    """Pixels of the selected regions that touch a different region (4-neighbourhood)."""
    sel = np.isin(labels, list(selected))
    edge = np.zeros_like(sel)
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return sel & edge


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    H, W = data.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 image")
    W, H = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(H, W, 3)


HIGHLIGHT = np.array([1.0, 0.0, 0.0])


def cmd_export_overlays(results_dir: Path, out: Path, batch: int, strategy: str | None,
                        seed: int | None, frames: list[int] | None) -> int:
    cfg_path = results_dir / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"missing results: {cfg_path}")
    cfg = json.loads(cfg_path.read_text())
    cfg.pop("command", None)
    exp = build_experiment(merge_config(default_config(), cfg))
    strategy = strategy or cfg["strategies"][-1]
    seed = exp.seeds[0] if seed is None else seed
    label = strategy if exp.granularity == "region" else f"{strategy}-image"
    ds = load_experiment_dataset(exp)
    units = json.loads((results_dir / "units.json").read_text())["regions"]

    picks = []
    with open(results_dir / "selection.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("run") == label and rec["seed"] == seed and rec["batch"] == batch:
                picks.append(rec["region_id"])
    if not picks:
        raise ConfigError(f"unknown batch {batch} for {label}, seed {seed}")
    by_frame: dict = {}
    for gid in picks:
        k, _, local = units[gid]
        by_frame.setdefault(k, set()).add(local)

    ids = [fr.frame_id for fr in ds.train_frames]
    if frames is None:
        chosen = sorted(by_frame)
    else:
        unknown = [f for f in frames if f not in ids]
        if unknown:
            raise ConfigError(f"unknown frame id(s) {unknown}")
        chosen = [ids.index(f) for f in frames]

    unc = None
    unc_path = results_dir / f"uncertainty_{label}_s{seed}_b{batch}.bin"
    if unc_path.exists():
        H, W = ds.intrinsics.height, ds.intrinsics.width
        unc = np.frombuffer(unc_path.read_bytes(), dtype="<f4").reshape(-1, H, W)

    out.mkdir(parents=True, exist_ok=True)
    for k in chosen:
        fr = ds.train_frames[k]
        part = Partition.load(results_dir / f"regions_{fr.frame_id:05d}.bin", fr.frame_id,
                              *fr.sem.shape)
        img = fr.rgb.astype(np.float64).copy()
        img[boundary_mask(part.labels, by_frame.get(k, set()))] = HIGHLIGHT
        stem = f"{label}_s{seed}_b{batch}_f{fr.frame_id:05d}"
        write_ppm(out / f"overlay_{stem}.ppm", img)
        if unc is not None:
            write_ppm(out / f"uncertainty_{stem}.ppm", unc[k] / math.log(ds.class_count))
        print(f"frame {fr.frame_id}: {len(by_frame.get(k, ()))} selected regions")
    return 0


# --------------------------------------------------------------------------
# entry point


def set_threads(n: int | None) -> int:
    import numba
    if n is None:
        env = os.environ.get("ALR_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alr", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="global seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $ALR_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path, default=None, help="JSON config file")
        sp.add_argument("--out", type=Path, required=True, help="output directory")

    with_config(sub.add_parser("gen-scene", help="generate and render a synthetic dataset"))
    tf = sub.add_parser("train-full", help="train on every label (upper bound)")
    with_config(tf)
    tf.add_argument("--from-checkpoint", default=None, help="evaluate a saved field.bin")
    with_config(sub.add_parser("run-al", help="run active-learning experiments"))
    rp = sub.add_parser("report", help="budget table and learning-curve SVG")
    rp.add_argument("results", type=Path)
    rp.add_argument("--target-budget", type=float, default=None)
    ov = sub.add_parser("export-overlays", help="PPM overlays of selected regions")
    ov.add_argument("results", type=Path)
    ov.add_argument("--out", type=Path, required=True)
    ov.add_argument("--batch", type=int, required=True)
    ov.add_argument("--strategy", default=None)
    ov.add_argument("--frames", type=str, default=None, help="comma-separated frame ids")
    return p


def load_config(args, overrides: list[str]) -> dict:
    cfg = default_config()
    if args.config is not None:
        try:
            cfg = merge_config(cfg, json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    cfg = apply_overrides(cfg, overrides)
    if args.seed is not None:
        if args.command == "gen-scene":
            cfg["scene"]["seed"] = args.seed
        elif args.command == "train-full":
            cfg["train"]["seed"] = args.seed
        else:
            cfg["seeds"] = [args.seed]
    return cfg


def main(argv=None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads(args.threads)
        if args.command in ("report", "export-overlays"):
            if extra:
                raise ConfigError(f"unexpected arguments: {extra}")
            if args.command == "report":
                return cmd_report(args.results, args.target_budget)
            frames = None if args.frames is None else [int(v) for v in args.frames.split(",")]
            return cmd_export_overlays(args.results, args.out, args.batch, args.strategy,
                                       args.seed, frames)
        cfg = load_config(args, extra)
        build_experiment(cfg)
        print("effective config: " + json.dumps(cfg, sort_keys=True))
        if args.command == "gen-scene":
            return cmd_gen_scene(cfg, args.out)
        if args.command == "train-full":
            return cmd_train_full(cfg, args.out, args.from_checkpoint)
        return cmd_run_al(cfg, args.out)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
