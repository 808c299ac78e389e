"""Command-line front end: ``fcooper pipeline | pack | unpack | report``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from collections import defaultdict

from . import netsim, wire
from .encoder import EncoderWeights, encode_voxels, spatial_features
from .evalkit.scene import generate_scene
from .fusion import ChannelMask, select_channels
from .pipeline import RunConfig, bundled_scenes, load_scene, run, write_outputs
from .voxel import DESK_GRID, PAPER_GRID, voxelize

GRIDS = {"desk": DESK_GRID, "paper": PAPER_GRID}
SEED_ENV = "FCOOPER_SEED"


class CliError(Exception):
    pass


def resolve_seed(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"{SEED_ENV}={env!r} is not an integer") from None


def _mask(text: str) -> ChannelMask:
    try:
        return ChannelMask.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _nonneg(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", default="occlusion",
                   help=f"scene JSON path or bundled name ({', '.join(bundled_scenes())})")
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--grid", choices=sorted(GRIDS), default="desk", help="voxel grid preset")
    p.add_argument("--mask", type=_mask, default=ChannelMask.parse("full"),
                   help="channel mask: full, key, min or ranges like 55-99")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fcooper", description="Feature-level cooperative perception toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="run one scene end to end and write CSV reports")
    _add_common(p)
    p.add_argument("--strategy", choices=netsim.STRATEGIES, default="sff")
    p.add_argument("--link", choices=sorted(netsim.LINK_PROFILES), default="dsrc")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--drift", type=_nonneg, default=0.0, help="sender GPS drift in meters")
    p.add_argument("--duration", type=_positive, default=1.0, help="simulated seconds (1 Hz rounds)")

    p = sub.add_parser("pack", help="encode a vehicle's features (or a logical file) as a wire message")
    _add_common(p)
    p.add_argument("--kind", choices=("voxel", "spatial"), default="spatial")
    p.add_argument("--vehicle", type=int, default=1, help="index of the sending vehicle")
    p.add_argument("--logical", help="re-wrap an uncompressed message written by unpack instead")
    p.add_argument("--out", required=True, help="output message file")

    p = sub.add_parser("unpack", help="verify and decode a wire message")
    p.add_argument("message")
    p.add_argument("--out", help="write the uncompressed message here (plus a .json summary)")

    p = sub.add_parser("report", help="aggregate pipeline CSVs into plot series")
    p.add_argument("dirs", nargs="+", help="directories holding pipeline outputs (searched recursively)")
    p.add_argument("--out", help="output directory (default: first input directory)")
    return ap


def cmd_pipeline(args) -> int:
    cfg = RunConfig(
        load_scene(args.scene), strategy=args.strategy, mask=args.mask, link=args.link,
        seed=resolve_seed(args.seed), grid=GRIDS[args.grid], duration=args.duration, drift=args.drift,
    )
    for path in write_outputs(run(cfg), args.out):
        print(path)
    return 0


def cmd_pack(args) -> int:
    if args.logical:
        with open(args.logical, "rb") as fh:
            logical = fh.read()
        wire.decode_logical(logical)  # validate before wrapping
    else:
        cfg = load_scene(args.scene)
        if not 0 <= args.vehicle < len(cfg.vehicles):
            raise CliError(f"vehicle index {args.vehicle} out of range")
        seed = resolve_seed(args.seed)
        grid = GRIDS[args.grid]
        scene = generate_scene(cfg, seed)
        weights = EncoderWeights.generate()
        pose = cfg.vehicles[args.vehicle]
        store = encode_voxels(grid, voxelize(grid, scene.clouds[args.vehicle], seed=seed), weights)
        if args.kind == "voxel":
            logical = wire.encode_logical(wire.KIND_VOXEL, store, pose=pose)
        else:
            fmap = select_channels(spatial_features(store, weights, pose), args.mask)
            logical = wire.encode_logical(wire.KIND_SPATIAL, fmap, mask=args.mask)
    data = wire.compress(logical)
    with open(args.out, "wb") as fh:
        fh.write(data)
    r = wire.size_report(logical, data)
    print(f"{args.out}: logical {r.logical_bytes} B, wire {r.wire_bytes} B, ratio {r.ratio:.4f}")
    return 0


def message_summary(msg: wire.FeatureMessage, logical: bytes) -> dict:
    kinds = {wire.KIND_VOXEL: "voxel", wire.KIND_SPATIAL: "spatial", wire.KIND_DETECTIONS: "detections"}
    return {
        "kind": kinds[msg.kind],
        "version": msg.version,
        "pose": list(msg.pose.as_tuple()),
        "grid": {"x_range": list(msg.grid.x_range), "y_range": list(msg.grid.y_range),
                 "z_range": list(msg.grid.z_range), "voxel_size": list(msg.grid.voxel_size)},
        "mask": msg.mask.label,
        "count": msg.count,
        "logical_bytes": len(logical),
        "sha256": hashlib.sha256(logical).hexdigest(),
    }


def cmd_unpack(args) -> int:
    with open(args.message, "rb") as fh:
        data = fh.read()
    logical = wire.decompress(data)
    msg = wire.decode_logical(logical)
    summary = message_summary(msg, logical)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(logical)
        with open(args.out + ".json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _read_rows(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _find(dirs, name) -> list[str]:
    found = []
    for d in dirs:
        if not os.path.isdir(d):
            raise CliError(f"not a directory: {d}")
        for root, _, files in os.walk(d):
            if name in files:
                found.append(os.path.join(root, name))
    return sorted(found)


def _write(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(path)


def cmd_report(args) -> int:
    metrics = _find(args.dirs, "metrics.csv")
    sizes = _find(args.dirs, "sizes.csv")
    if not metrics or not sizes:
        raise CliError("no pipeline outputs (metrics.csv and sizes.csv) found")
    out = args.out or args.dirs[0]
    os.makedirs(out, exist_ok=True)

    # mask label per run directory, so series are keyed by strategy and channel set
    run_mask = {}
    volume = defaultdict(lambda: [0, 0, 0, 0])
    for path in sizes:
        for r in _read_rows(path):
            key = (r["strategy"], r["mask"])
            run_mask[os.path.dirname(path)] = r["mask"]
            v = volume[key]
            v[0] += 1
            v[1] += int(r["logical_bytes"])
            v[2] += int(r["wire_bytes"])
            v[3] += int(r["raw_reference_bytes"])

    prec = defaultdict(lambda: [0, 0])
    time_ms = defaultdict(list)
    for path in metrics:
        mask = run_mask.get(os.path.dirname(path), "")
        for r in _read_rows(path):
            key = (r["strategy"], "" if r["strategy"] == "single" else mask, r["bucket"])
            prec[key][0] += int(r["tp"])
            prec[key][1] += int(r["detections"])
            if r["strategy"] != "single" and r["bucket"] == "near":
                time_ms[key[:2]].append(float(r["ms"]))

    _write(os.path.join(out, "series_precision.csv"), ["strategy", "mask", "bucket", "precision", "tp", "detections"],
           [[*k, f"{100 * tp / n:.2f}" if n else "N/A", tp, n] for k, (tp, n) in sorted(prec.items())])
    _write(os.path.join(out, "series_volume.csv"),
           ["strategy", "mask", "runs", "mean_logical_bytes", "mean_wire_bytes", "mean_raw_reference_bytes"],
           [[*k, n, f"{lb / n:.1f}", f"{wb / n:.1f}", f"{rb / n:.1f}"] for k, (n, lb, wb, rb) in sorted(volume.items())])
    _write(os.path.join(out, "series_time.csv"), ["strategy", "mask", "runs", "mean_ms"],
           [[*k, len(v), f"{sum(v) / len(v):.3f}"] for k, v in sorted(time_ms.items())])
    return 0


COMMANDS = {"pipeline": cmd_pipeline, "pack": cmd_pack, "unpack": cmd_unpack, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError) as exc:
        print(f"fcooper: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
