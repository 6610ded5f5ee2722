"""``thyrovol`` command line: simulate, compound, train, segment, volume, stats, report.

Exit codes: 0 success, 2 input error, 3 configuration error. Each command
builds its outputs in a scratch directory beside ``--out`` and moves it into
place only on success, so a failed run leaves nothing behind. Every output
directory carries one ``manifest.json``; artifacts themselves hold no
timestamps, so identical inputs, flags and seed give identical bytes.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ThyroVolError
from .obstats import (
    MODALITIES,
    Measurement,
    MeasurementTable,
    StatsConfig,
    bland_altman_svg,
    compare_to_reference,
    comparison_rows,
    interobserver_table,
    intraobserver_table,
    read_reference_csv,
    write_comparisons_csv,
    write_reference_csv,
)
from .volumetry import LobeAxes, VolumetryConfig, ellipsoid_volume, mask_volume

EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _fmt(v: float) -> str:
    return f"{float(v):.10g}"


# --------------------------------------------------------------------------
# option resolution: flags > config file > defaults

DEFAULTS = {
    "simulate": {"subjects": 3, "observers": 3, "repeats": 1, "population_seed": None, "sweeps": True},
    "compound": {"spacing": 0.5, "kernel": "trilinear", "padding": 2.0, "hole_fill": 1},
    "train": {"train_subjects": 16, "val_subjects": 4, "slices_per_lobe": 5, "size": 256, "epochs": 20,
              "batch_size": 4, "learning_rate": 1e-5, "lr_scale": 1000.0, "momentum": 0.9,
              "optimizer": "sgd", "channels": 16},
    "segment": {"model": None, "threshold": 0.5, "size": 256, "side": None},
    "volume": {"method": None, "axes": None, "mask": None, "factor": 0.48},
    "stats": {"alpha": 0.05},
    "report": {"alpha": 0.05, "variability": "range_ratio"},
}


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: config file not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return data


def _resolve(args, command: str) -> dict:
    """Merge defaults, the command's config-file section and explicit flags."""
    cfg = _load_config(args.config)
    known = set(DEFAULTS) | {"seed", "threads"}
    for key in cfg:
        if key not in known:
            raise ConfigError(f"{args.config}: unknown section '{key}'")
    section = cfg.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"{args.config}: section '{command}' must be an object")
    out = dict(DEFAULTS[command])
    for key, val in section.items():
        if key not in out:
            raise ConfigError(f"{args.config}: unknown field '{command}.{key}'")
        out[key] = val
    for key in out:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
    for key, default in (("seed", 0), ("threads", 1)):
        flag = getattr(args, key)
        out[key] = flag if flag is not None else cfg.get(key, default)
    if not isinstance(out["threads"], int) or out["threads"] < 1:
        raise ConfigError(f"threads must be a positive integer, got {out['threads']!r}")
    if not isinstance(out["seed"], int) or out["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {out['seed']!r}")
    return out


# --------------------------------------------------------------------------
# output staging and manifest

class _Staged:
    """Scratch directory that replaces ``out`` on success and vanishes on failure."""

    def __init__(self, out):
        self.out = Path(out)
        if self.out.exists() and (not self.out.is_dir() or any(self.out.iterdir())):
            raise ThyroVolError(f"{self.out}: output path exists and is not an empty directory")

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            if self.out.exists():
                self.out.rmdir()
            self.tmp.rename(self.out)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _manifest(root: Path, command: str, resolved: dict, inputs, started: float):
    """The only file that records wall-clock time."""
    data = {
        "command": command,
        "tool_version": __version__,
        "master_seed": resolved["seed"],
        "config": resolved,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()),
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (root / "manifest.json").write_text(json.dumps(data, indent=2, default=str) + "\n")


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _containers(path: Path, marker: str) -> list:
    """``path`` itself if it holds ``marker``, else its children that do."""
    if not path.exists():
        raise ThyroVolError(f"{path}: no such file or directory")
    if (path / marker).exists():
        return [path]
    found = sorted(p for p in path.iterdir() if p.is_dir() and (p / marker).exists())
    if not found:
        raise ThyroVolError(f"{path}: missing {marker} (not a container or a directory of containers)")
    return found


def _copy_meta(src: Path, dst: Path):
    if (src / "meta.json").exists():
        shutil.copyfile(src / "meta.json", dst / "meta.json")


# --------------------------------------------------------------------------
# simulate

def _sweep_name(meta) -> str:
    return f"s{meta.subject_id}_o{meta.observer_id}_r{meta.repeat_index}_{meta.lobe}"


def _write_subject_sweeps(job):
    from .phantomsim import study_sweeps
    from .trackio import write_sweep

    population, idx, observers, repeats, seed, root = job
    for sweep in study_sweeps(population, observers, repeats, master_seed=seed, subjects=[idx]):
        write_sweep(sweep, Path(root) / _sweep_name(sweep.meta))


def cmd_simulate(args, opts, stage: Path):
    from .phantomsim import run_study, sample_population

    for key in ("subjects", "observers", "repeats"):
        if int(opts[key]) < 1:
            raise ConfigError(f"{key} must be at least 1")
    pop_seed = opts["seed"] if opts["population_seed"] is None else opts["population_seed"]
    population = sample_population(int(opts["subjects"]), seed=int(pop_seed))
    study = run_study(population, int(opts["observers"]), int(opts["repeats"]), pipelines=("us2d",),
                      master_seed=opts["seed"])
    study.table.to_csv(stage / "study.csv")
    write_reference_csv(study.reference, stage / "reference.csv")
    phantoms = [{"subject": str(i + 1), **asdict(s)} for i, s in enumerate(population)]
    (stage / "phantoms.json").write_text(json.dumps(phantoms, indent=2) + "\n")
    if opts["sweeps"]:
        root = stage / "sweeps"
        root.mkdir()
        jobs = [(population, i, int(opts["observers"]), int(opts["repeats"]), opts["seed"], str(root))
                for i in range(len(population))]
        _map(_write_subject_sweeps, jobs, opts["threads"])
    print(f"simulated {len(population)} subjects -> {args.out}")


# --------------------------------------------------------------------------
# compound

def _compound_one(job):
    from .compounder import CompoundingConfig, compound
    from .grid import write_volume
    from .trackio import read_sweep, synchronize

    src, dst, cfg = job
    grid = compound(synchronize(read_sweep(src)), CompoundingConfig(**cfg))
    write_volume(grid, dst)
    _copy_meta(Path(src), Path(dst))


def cmd_compound(args, opts, stage: Path):
    from .compounder import CompoundingConfig

    cfg = {"voxel_spacing": float(opts["spacing"]), "splat_kernel": opts["kernel"],
           "padding": float(opts["padding"]), "hole_fill_radius": int(opts["hole_fill"])}
    CompoundingConfig(**cfg).validate()
    src = Path(args.input)
    sweeps = _containers(src, "meta.json")
    if sweeps == [src]:
        jobs = [(str(src), str(stage), cfg)]
    else:
        jobs = [(str(s), str(stage / s.name), cfg) for s in sweeps]
    _map(_compound_one, jobs, opts["threads"])
    print(f"compounded {len(jobs)} sweep(s) -> {args.out}")


# --------------------------------------------------------------------------
# train

def _pin_torch():
    import torch

    # intra-op threading is pinned so --threads never changes float results
    torch.set_num_threads(1)
    return torch


def cmd_train(args, opts, stage: Path):
    torch = _pin_torch()

    from .neuralseg import ArchitectureSpec, TrainConfig, build_network, save_checkpoint, train, write_metrics_csv
    from .phantomsim import sample_population, training_slices

    size = int(opts["size"])
    spec = ArchitectureSpec(channels=int(opts["channels"]))
    if size < spec.divisor or size % spec.divisor:
        raise ConfigError(f"size must be a positive multiple of {spec.divisor}, got {size}")
    cfg = TrainConfig(epochs=int(opts["epochs"]), batch_size=int(opts["batch_size"]),
                      learning_rate=float(opts["learning_rate"]), lr_scale=float(opts["lr_scale"]),
                      momentum=float(opts["momentum"]), optimizer=opts["optimizer"], seed=opts["seed"])
    seed = opts["seed"]
    # training and validation phantoms come from disjoint seed streams
    tr = training_slices(sample_population(int(opts["train_subjects"]), seed=2 * seed + 1),
                         int(opts["slices_per_lobe"]), (size, size), seed=2 * seed + 1)
    va = training_slices(sample_population(int(opts["val_subjects"]), seed=2 * seed + 2),
                         int(opts["slices_per_lobe"]), (size, size), seed=2 * seed + 2)
    net = build_network(spec, seed=seed, dtype=torch.float32)

    def log(m):
        print(f"epoch {m.epoch}: train_loss={m.train_loss:.4f} val_loss={m.val_loss:.4f} "
              f"val_dice={m.val_dice:.4f}", flush=True)

    result = train(net, tr, cfg, va, log=log)
    save_checkpoint(result.net, stage / "model.ckpt")
    write_metrics_csv(result.history, stage / "metrics.csv")
    print(f"best epoch {result.best_epoch}: val_dice={result.best.val_dice:.4f}")


# --------------------------------------------------------------------------
# segment

def _side_of(vol_dir: Path, override):
    if override is not None:
        return override
    meta = vol_dir / "meta.json"
    if meta.exists():
        try:
            return json.loads(meta.read_text()).get("lobe")
        except json.JSONDecodeError as exc:
            raise ThyroVolError(f"{meta} line {exc.lineno}: {exc.msg}") from None
    return None


def cmd_segment(args, opts, stage: Path):
    from .grid import LabelMask, VoxelGrid, read_volume, write_volume
    from .phantomsim import threshold_segment

    src = Path(args.input)
    vols = _containers(src, "volume.json")
    if opts["side"] not in (None, "left", "right"):
        raise ConfigError(f"side must be 'left' or 'right', got {opts['side']!r}")
    if opts["model"] is not None:
        from .neuralseg import load_checkpoint, segment_volume

        _pin_torch()
        model = Path(opts["model"])
        if not model.exists():
            raise ThyroVolError(f"{model}: model checkpoint not found")
        net = load_checkpoint(model)
        size = int(opts["size"])

        def seg(grid, side):
            return segment_volume(net, grid, (size, size), side)
    else:
        level = float(opts["threshold"])

        def seg(grid, side):
            return threshold_segment(grid, level)

    for v in vols:
        grid = read_volume(v)
        if isinstance(grid, LabelMask) or not isinstance(grid, VoxelGrid):
            raise ThyroVolError(f"{v / 'volume.json'}: expected an f32le intensity volume, got a mask")
        dst = stage if vols == [src] else stage / v.name
        write_volume(seg(grid, _side_of(v, opts["side"])), dst)
        _copy_meta(v, dst)
    print(f"segmented {len(vols)} volume(s) -> {args.out}")


# --------------------------------------------------------------------------
# volume

def _parse_axes(text) -> LobeAxes:
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise ConfigError(f"--axes expects L,W,D in cm, got {text!r}") from None
    if len(vals) != 3:
        raise ConfigError(f"--axes expects three values L,W,D, got {text!r}")
    return LobeAxes(*vals)


def _mask_table(masks) -> MeasurementTable:
    """Sum lobe mask volumes into per-(subject, observer, repeat) 3D totals."""
    from .grid import LabelMask, read_volume

    lobes = {}
    for m in masks:
        meta_path = m / "meta.json"
        if not meta_path.exists():
            raise ThyroVolError(f"{meta_path}: file not found (needed to build a measurement table)")
        meta = json.loads(meta_path.read_text())
        try:
            key = (str(meta["subject_id"]), int(meta["observer_id"]), int(meta["repeat_index"]))
            side = meta["lobe"]
        except KeyError as exc:
            raise ThyroVolError(f"{meta_path}: missing field {exc}") from None
        mask = read_volume(m)
        if not isinstance(mask, LabelMask):
            raise ThyroVolError(f"{m / 'volume.json'}: expected a u8 mask")
        if (key, side) in lobes:
            raise ThyroVolError(f"{m}: duplicate {side} lobe for subject {key[0]}, observer {key[1]}, repeat {key[2]}")
        lobes[(key, side)] = mask_volume(mask)
    rows = []
    for key in dict.fromkeys(k for k, _ in lobes):
        if (key, "left") not in lobes or (key, "right") not in lobes:
            raise ThyroVolError(f"subject {key[0]}, observer {key[1]}, repeat {key[2]}: both lobes are needed")
        total = 0.0
        for side in ("left", "right"):
            total += lobes[(key, side)]
        rows.append(Measurement(key[0], key[1], key[2], "us3d", total))
    rows.sort(key=lambda r: (_subject_sort(r.subject), r.observer, r.repeat))
    return MeasurementTable(rows)


def _subject_sort(s):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


def cmd_volume(args, opts, stage: Path | None):
    method = opts["method"]
    if method == "ellipsoid":
        if opts["axes"] is None:
            raise ConfigError("--method ellipsoid needs --axes L,W,D")
        v = ellipsoid_volume(_parse_axes(opts["axes"]), VolumetryConfig(float(opts["factor"])))
        print(_fmt(v))
        if stage is not None:
            (stage / "volume.txt").write_text(_fmt(v) + "\n")
        return
    if method != "mask":
        raise ConfigError(f"--method must be 'ellipsoid' or 'mask', got {method!r}")
    if opts["mask"] is None:
        raise ConfigError("--method mask needs --mask PATH")
    from .grid import LabelMask, read_volume

    src = Path(opts["mask"])
    masks = _containers(src, "volume.json")
    if masks == [src]:
        mask = read_volume(src)
        if not isinstance(mask, LabelMask):
            raise ThyroVolError(f"{src / 'volume.json'}: expected a u8 mask")
        v = mask_volume(mask)
        print(_fmt(v))
        if stage is not None:
            (stage / "volume.txt").write_text(_fmt(v) + "\n")
        return
    table = _mask_table(masks)
    for r in table:
        print(f"subject {r.subject} observer {r.observer} repeat {r.repeat}: {_fmt(r.volume_ml)}")
    if stage is not None:
        table.to_csv(stage / "measurements_3d.csv")


# --------------------------------------------------------------------------
# stats and report

def _read_tables(paths) -> MeasurementTable:
    table = MeasurementTable()
    for p in paths:
        for rec in MeasurementTable.from_csv(p):
            try:
                table.add(rec)
            except ThyroVolError as exc:
                raise ThyroVolError(f"{p}: {exc}") from None
    return table


def _modalities(table):
    return [m for m in MODALITIES if m != "reference" and table.select(modality=m)]


def _comparisons(table, reference, cfg):
    inter, ref = [], []
    for m in _modalities(table):
        inter += interobserver_table(table, m, cfg)
        if reference is not None:
            ref += compare_to_reference(table, m, reference, cfg)
    return inter, ref


def cmd_stats(args, opts, stage: Path):
    table = _read_tables(args.measurements)
    reference = read_reference_csv(args.reference) if args.reference else None
    inter, ref = _comparisons(table, reference, StatsConfig(alpha=float(opts["alpha"])))
    write_comparisons_csv(inter + ref, stage / "study_stats.csv")
    for row in comparison_rows(inter + ref):
        print(f"{row[0]}: bias={row[2]} sd={row[3]} p={row[8]}")


def _write_rows(path, header, rows):
    path.write_text("\n".join(",".join(r) for r in [header, *rows]) + "\n")


def cmd_report(args, opts, stage: Path):
    table = _read_tables(args.measurements)
    reference = read_reference_csv(args.reference) if args.reference else None
    cfg = StatsConfig(alpha=float(opts["alpha"]))
    inter, ref = _comparisons(table, reference, cfg)

    # volumes per modality and observer, first repeat
    vol_rows = []
    for m in _modalities(table):
        for obs in table.observers(m):
            v = np.array([r.volume_ml for r in table.select(modality=m, observer=obs, repeat=1)])
            sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
            vol_rows.append([m, str(obs), str(len(v)), _fmt(v.mean()), _fmt(sd), _fmt(v.min()), _fmt(v.max())])
    if reference:
        v = np.array([reference[s] for s in sorted(reference, key=_subject_sort)])
        sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        vol_rows.append(["reference", "", str(len(v)), _fmt(v.mean()), _fmt(sd), _fmt(v.min()), _fmt(v.max())])
    _write_rows(stage / "table1_volumes.csv", ["modality", "observer", "n", "mean", "sd", "min", "max"], vol_rows)

    var_rows = []
    for m in _modalities(table):
        for obs in table.observers(m):
            if len({r.repeat for r in table.select(modality=m, observer=obs)}) < 2:
                continue
            res = intraobserver_table(table, m, obs, opts["variability"])
            var_rows.append([m, str(obs), res.method, str(len(res.per_subject)), _fmt(res.mean), _fmt(res.sd)])
    _write_rows(stage / "table2_intraobserver.csv", ["modality", "observer", "method", "n", "mean_percent",
                                                     "sd_percent"], var_rows)
    write_comparisons_csv(inter, stage / "table2_interobserver.csv")
    write_comparisons_csv(ref, stage / "table3_reference.csv")

    plots = stage / "plots"
    plots.mkdir()
    for r in inter + ref:
        name = r.name.replace(":", "_").replace("-", "_vs_").lower()
        (plots / f"{name}.svg").write_text(bland_altman_svg(r.bland_altman, r.name))
    print(f"report: {len(inter) + len(ref)} comparisons -> {args.out}")


# --------------------------------------------------------------------------
# parser

def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=None, help="worker processes (default 1)")
    common.add_argument("--config", default=None, help="JSON file with per-command sections")

    p = _Parser(prog="thyrovol", description="Tracked 3D ultrasound thyroid volumetry pipeline.",
                parents=[common])
    p.add_argument("--version", action="version", version=f"thyrovol {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="phantom population, 2D readings and 3D sweeps")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int)
    s.add_argument("--observers", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--population-seed", dest="population_seed", type=int)
    s.add_argument("--no-sweeps", dest="sweeps", action="store_const", const=False)

    s = sub.add_parser("compound", parents=[common], help="sweep container(s) to intensity volume(s)")
    s.add_argument("input", help="sweep directory, or a directory of sweeps")
    s.add_argument("--out", required=True)
    s.add_argument("--spacing", type=float, help="voxel spacing in mm (default 0.5)")
    s.add_argument("--kernel", choices=["nearest", "trilinear"])
    s.add_argument("--padding", type=float)
    s.add_argument("--hole-fill", dest="hole_fill", type=int)

    s = sub.add_parser("train", parents=[common], help="train the slice segmenter on simulated phantoms")
    s.add_argument("--out", required=True)
    for flag, typ in (("train-subjects", int), ("val-subjects", int), ("slices-per-lobe", int), ("size", int),
                      ("epochs", int), ("batch-size", int), ("learning-rate", float), ("lr-scale", float),
                      ("momentum", float), ("channels", int)):
        s.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ)
    s.add_argument("--optimizer", choices=["sgd", "adam"])

    s = sub.add_parser("segment", parents=[common], help="volume(s) to label mask(s)")
    s.add_argument("input", help="volume directory, or a directory of volumes")
    s.add_argument("--out", required=True)
    s.add_argument("--model", help="checkpoint from 'train'; intensity threshold if omitted")
    s.add_argument("--threshold", type=float)
    s.add_argument("--size", type=int, help="network canvas edge in pixels")
    s.add_argument("--side", choices=["left", "right"])

    s = sub.add_parser("volume", parents=[common], help="ellipsoid or voxel-count volume in ml")
    s.add_argument("--method", choices=["ellipsoid", "mask"])
    s.add_argument("--axes", help="L,W,D in cm")
    s.add_argument("--mask", help="mask directory, or a directory of masks")
    s.add_argument("--factor", type=float, help="ellipsoid correction factor (default 0.48)")
    s.add_argument("--out", help="optional output directory")

    for name, helptext in (("stats", "agreement statistics as CSV"), ("report", "tables and Bland-Altman plots")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--measurements", action="append", required=True, help="measurement CSV (repeatable)")
        s.add_argument("--reference", help="reference volume CSV")
        s.add_argument("--out", required=True)
        s.add_argument("--alpha", type=float)
        if name == "report":
            s.add_argument("--variability", choices=["range_ratio", "cv"])
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "compound": cmd_compound,
    "train": cmd_train,
    "segment": cmd_segment,
    "volume": cmd_volume,
    "stats": cmd_stats,
    "report": cmd_report,
}


def _inputs(args):
    out = []
    for key in ("input", "mask", "model", "reference"):
        v = getattr(args, key, None)
        if v:
            out.append(v)
    out += getattr(args, "measurements", None) or []
    return out


def run(argv=None) -> int:
    started = time.perf_counter()
    try:
        args = _parser().parse_args(argv)
        opts = _resolve(args, args.command)
        fn = COMMANDS[args.command]
        if args.command == "volume" and not args.out:
            fn(args, opts, None)
            return EXIT_OK
        with _Staged(args.out) as stage:
            fn(args, opts, stage)
            _manifest(stage, args.command, opts, _inputs(args), started)
        return EXIT_OK
    except (_UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ThyroVolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # dataclass validators outside the error hierarchy
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
