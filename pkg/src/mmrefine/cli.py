"""Command-line interface: ``simulate``, ``run``, ``cfar`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 I/O error while writing,
4 missing or malformed input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cfar as cf
from .errors import (
    EmptyCloud,
    EmptyTruth,
    InvalidConfig,
    InvalidRank,
    IoFailure,
    MissingAngleMap,
    MMRefineError,
    WindowTooLarge,
)
from .metrics import REPORT_FIELDS, evaluate
from .pipeline import ABLATION, RunConfig, run, run_ablation
from .sim import (
    _TRUTH_POINT_COLUMNS,
    PRESETS,
    SceneConfig,
    _read_csv,
    export,
    generate,
    load_scene,
    preset_config,
    radar_to_camera,
    write_manifest,
)
from .spurious import PointCloudFrame, write_frame

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INPUT = 0, 2, 3, 4

logger = logging.getLogger("mmrefine")


class InputError(Exception):
    """Missing or malformed input; maps to exit code 4."""


def _read_input(fn, *args):
    try:
        return fn(*args)
    except InvalidConfig:
        raise
    except (OSError, ValueError, KeyError, MissingAngleMap, MMRefineError) as exc:
        raise InputError(str(exc)) from exc


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    if not Path(path).is_file():
        raise InputError(f"config file {path} does not exist")
    return RunConfig.load(path)


def _dump(path: Path, obj) -> Path:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def _write_rows(path: Path, header, rows) -> Path:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc
    return path


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# ----------------------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    if args.config is not None:
        if not Path(args.config).is_file():
            raise InputError(f"config file {args.config} does not exist")
        cfg = SceneConfig.load(args.config)
        if args.preset is not None:
            raise InvalidConfig("give either --config or --preset, not both")
    else:
        cfg = SceneConfig.from_dict(preset_config(args.preset or "default"))
    if args.seed is not None:
        raw = cfg.to_dict()
        raw["seed"] = args.seed
        cfg = SceneConfig.from_dict(raw)
    scene = generate(cfg)
    manifest = export(scene, args.out)
    mirrors = sum(int(np.sum(t.kind == 1)) for t in scene.radar_truth)
    print(f"frames        {scene.n_frames}")
    print(f"radar points  {sum(len(f) for f in scene.frames)}")
    print(f"mirror points {mirrors}")
    print(f"tracks        {sum(len(t.tracks) for t in scene.track_sets)}")
    print(f"rdms          {len(scene.rdms)}")
    print(f"files         {len(manifest['files'])} in {len(manifest['groups'])} groups")
    return EXIT_OK


# ----------------------------------------------------------------------------- run


def _toggle(v: str | None, current: bool) -> bool:
    return current if v is None else v == "on"


def cmd_run(args) -> int:
    cfg = _load_run_config(args.config)
    cfg = cfg.with_toggles(_toggle(args.dvir, cfg["dynamic_reconstruction"]), _toggle(args.pr, cfg["spurious_filter"]))
    scene_dir = args.scene or cfg["scene"]
    if scene_dir is None:
        raise InvalidConfig("no scene directory given (config key 'scene' or --scene)")
    scene = _read_input(load_scene, scene_dir)
    if args.ablation:
        summary = run_ablation(cfg, args.out, scene, args.threads)
        print(_table([name for name, _, _ in ABLATION], [summary[name] for name, _, _ in ABLATION]))
    else:
        agg = run(cfg, args.out, scene, args.threads)
        print(_table([Path(args.out).name], [agg]))
    return EXIT_OK


# ----------------------------------------------------------------------------- cfar


def _rdm_inputs(args) -> tuple[list[Path], Path | None]:
    if args.rdm is not None:
        rdm_dir = Path(args.rdm)
    elif args.scene is not None:
        rdm_dir = Path(args.scene) / "rdm"
    else:
        raise InvalidConfig("give --rdm or --scene")
    if not rdm_dir.is_dir():
        raise InputError(f"RDM directory {rdm_dir} does not exist")
    paths = sorted(rdm_dir.glob("*.json"))
    if not paths:
        raise InputError(f"no range-Doppler matrices in {rdm_dir}")
    truth = rdm_dir.parent / "truth"
    return paths, truth if truth.is_dir() else None


def _truth_cloud(truth_dir: Path | None, name: str) -> np.ndarray | None:
    if truth_dir is None:
        return None
    p = truth_dir / name.replace("frame_", "cloud_").replace(".json", ".csv")
    if not p.is_file():
        return None
    return _read_input(_read_csv, p, _TRUTH_POINT_COLUMNS)[:, :3]


def _settings(args, c: dict) -> list[tuple[str, float | None, float | None]]:
    if args.mode == "pfa":
        pfa = args.pfa if args.pfa is not None else c["pfa"]
        return [(f"pfa_{pfa:g}", pfa, None)]
    offsets = args.offsets if args.offsets else c["offsets_db"]
    return [(f"{o:g}dB", None, float(o)) for o in offsets]


def cmd_cfar(args) -> int:
    cfg = _load_run_config(args.config)
    c = dict(cfg["cfar"])
    for key in ("detector", "guard", "train", "k"):
        if getattr(args, key) is not None:
            c[key] = getattr(args, key)
    n_t = cf.training_cells(c["guard"], c["train"])
    k = c["k"] if c["k"] is not None else max(1, int(round(0.75 * n_t)))
    paths, truth_dir = _rdm_inputs(args)
    rdms = [_read_input(cf.read_rdm, p) for p in paths]
    truths = [_truth_cloud(truth_dir, p.name) for p in paths]
    out = _mkdir(Path(args.out))
    files, settings = [], []
    for name, pfa, offset in _settings(args, c):
        sub = _mkdir(out / "clouds" / name)
        detections = tested = 0
        scores = []
        for p, rdm, truth in zip(paths, rdms, truths):
            try:
                if c["detector"] == "ca":
                    dets = cf.ca_cfar(rdm, c["guard"], c["train"], pfa=pfa, offset_db=offset)
                else:
                    dets = cf.os_cfar(rdm, c["guard"], c["train"], k, pfa=pfa, offset_db=offset)
            except (WindowTooLarge, InvalidRank) as exc:
                raise InvalidConfig(f"cfar: {exc}") from exc
            detections += len(dets)
            tested += cf.tested_cells(rdm, c["guard"], c["train"])
            try:
                pts = radar_to_camera(cf.detections_to_points(dets, rdm))
            except MissingAngleMap as exc:
                raise InputError(f"{p}: {exc}") from exc
            cloud = sub / p.name.replace(".json", ".csv")
            write_frame(PointCloudFrame(0.0, pts), cloud)
            files.append(cloud)
            if truth is not None and len(pts):
                try:
                    scores.append(evaluate(pts, truth, cfg["metrics"]["delta"]).to_dict())
                except (EmptyTruth, EmptyCloud):
                    pass
        entry = {
            "name": name,
            "detector": c["detector"],
            "pfa": pfa,
            "offset_db": offset,
            "frames": len(paths),
            "points": detections,
            "tested_cells": tested,
            "alarm_rate": detections / tested if tested else None,
            "scored_frames": len(scores),
        }
        for key in REPORT_FIELDS:
            entry[key] = float(np.mean([s[key] for s in scores])) if scores else None
        settings.append(entry)
    files.append(_dump(out / "cfar_summary.json", {"settings": settings}))
    header = ("name", "points", "alarm_rate", *REPORT_FIELDS)
    files.append(_write_rows(out / "sweep.csv", header, ([_fmt(e[h]) for h in header] for e in settings)))
    write_manifest(out, files, {"kind": "cfar"})
    print(_table([e["name"] for e in settings], settings))
    return EXIT_OK


# ----------------------------------------------------------------------------- report

_TABLE_KEYS = (
    *REPORT_FIELDS,
    "spurious_recall",
    "spurious_precision",
    "transform_loss",
    "failures",
    "points",
    "alarm_rate",
)


def _table(names: list[str], rows: list[dict]) -> str:
    keys = [k for k in _TABLE_KEYS if any(k in r for r in rows)]
    if len(rows) == 1:
        return "\n".join(f"{k:<20}{_fmt(rows[0].get(k))}" for k in keys)
    width = max(12, *(len(n) + 2 for n in names))
    lines = [f"{'metric':<20}" + "".join(f"{n:>{width}}" for n in names)]
    for k in keys:
        lines.append(f"{k:<20}" + "".join(f"{_fmt(r.get(k)):>{width}}" for r in rows))
    return "\n".join(lines)


def _collect(run_dir: Path) -> list[tuple[str, dict]]:
    """Named metric rows of one run, ablation or CFAR output directory."""
    if (run_dir / "aggregate.json").is_file():
        return [(run_dir.name, json.loads((run_dir / "aggregate.json").read_text()))]
    if (run_dir / "ablation.json").is_file():
        summary = json.loads((run_dir / "ablation.json").read_text())
        return [(f"{run_dir.name}/{name}", summary[name]) for name, _, _ in ABLATION if name in summary]
    if (run_dir / "cfar_summary.json").is_file():
        summary = json.loads((run_dir / "cfar_summary.json").read_text())
        return [(f"{run_dir.name}/{e['name']}", e) for e in summary["settings"]]
    raise InputError(f"{run_dir} holds no aggregate.json, ablation.json or cfar_summary.json")


def cmd_report(args) -> int:
    entries: list[tuple[str, dict]] = []
    for d in args.runs:
        entries += _read_input(_collect, Path(d))
    if not entries:
        raise InputError("no completed runs found")
    names = [n for n, _ in entries]
    rows = [r for _, r in entries]
    text = _table(names, rows)
    print(text)
    if args.out is not None:
        out = _mkdir(Path(args.out))
        files = [out / "report.txt"]
        try:
            files[0].write_text(text + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write {files[0]}: {exc}") from exc
        files.append(
            _write_rows(
                out / "density.csv",
                ("method", "clutter_count", "rpcdl"),
                ([n, _fmt(r.get("clutter_count")), _fmt(r.get("rpcdl"))] for n, r in entries),
            )
        )
        files.append(
            _write_rows(
                out / "distance.csv",
                ("method", "chamfer", "modified_hausdorff"),
                ([n, _fmt(r.get("chamfer")), _fmt(r.get("modified_hausdorff"))] for n, r in entries),
            )
        )
        write_manifest(out, files, {"kind": "report"})
    return EXIT_OK


# ----------------------------------------------------------------------------- entry point


def _common() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the verb without clobbering each other
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON configuration file")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for per-frame work")
    p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="mmrefine", description="Radar point-cloud refinement toolkit.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate and export a synthetic scene")
    s.add_argument("--preset", choices=sorted(PRESETS), help="built-in scene instead of --config")
    s.add_argument("--seed", type=int, help="override the scene seed")
    s.set_defaults(func=cmd_simulate, needs_out=True)

    r = sub.add_parser("run", parents=[common], help="refine the radar clouds of an exported scene")
    r.add_argument("--scene", help="scene directory (overrides the config key 'scene')")
    r.add_argument("--dvir", choices=("on", "off"), help="dynamic reconstruction toggle")
    r.add_argument("--pr", choices=("on", "off"), help="spurious-point filter toggle")
    r.add_argument("--ablation", action="store_true", help="run all four toggle combinations")
    r.set_defaults(func=cmd_run, needs_out=True)

    c = sub.add_parser("cfar", parents=[common], help="baseline CFAR detection on range-Doppler matrices")
    c.add_argument("--rdm", help="directory of range-Doppler matrices")
    c.add_argument("--scene", help="scene directory; uses its rdm/ and truth/")
    c.add_argument("--mode", choices=("pfa", "db_offset"), default="db_offset")
    c.add_argument("--detector", choices=("ca", "os"))
    c.add_argument("--guard", type=int)
    c.add_argument("--train", type=int)
    c.add_argument("--k", type=int, help="OS-CFAR rank")
    c.add_argument("--pfa", type=float)
    c.add_argument("--offsets", type=float, nargs="+", help="dB offsets of the sweep")
    c.set_defaults(func=cmd_cfar, needs_out=True)

    p = sub.add_parser("report", parents=[common], help="compare completed runs")
    p.add_argument("runs", nargs="+", help="run, ablation or CFAR output directories")
    p.set_defaults(func=cmd_report, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, default in (("config", None), ("out", None), ("threads", 1), ("verbose", False)):
        if not hasattr(args, key):
            setattr(args, key, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.needs_out and args.out is None:
        parser.error(f"{args.command} needs --out")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
