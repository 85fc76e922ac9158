"""``nf3d`` command line: encode, decode, eval, sweep."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .codec import check_compatible, decode_streams, encode_shape, resolve_seeds
from .compression import BitstreamError, ChecksumError, CompressedField
from .config import ConfigError, RunConfig, parse_value, resolve_threads
from .evaluation import attribute_psnr, chamfer, rd_sweep, write_rd_csv, write_rd_svg
from .extraction import EmptySurfaceError
from .geometry_io import (GeometryError, PointCloud, TriMesh, load_shape, normalize,
                          sample_surface, save_shape)
from .training import TrainingDivergence

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_PARSE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CRC, EXIT_EMPTY, EXIT_ALL_FAILED = range(7)
ATTR_SUFFIX = ".attr.nf3d"

log = logging.getLogger("nf3d")

# short aliases for the most used config keys
_ALIASES = {"param_seed": ["--seed-params"], "data_seed": ["--seed-data"],
            "m_total": ["--samples"], "n_points": ["--points"]}


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def attr_path(path: Path) -> Path:
    name = path.name[:-len(".nf3d")] if path.name.endswith(".nf3d") else path.name
    return path.with_name(name + ATTR_SUFFIX)


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("run configuration (override --config)")
    for f in fields(RunConfig):
        if f.name in skip:
            continue
        flags = ["--" + f.name.replace("_", "-")] + _ALIASES.get(f.name, [])
        g.add_argument(*flags, dest="cfg_" + f.name, default=None, metavar="V",
                       help=f"default: {getattr(RunConfig(), f.name)}")
    p.add_argument("--config", type=Path, help="flat 'key = value' file")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nf3d", description="Neural-field 3D geometry codec")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="compress a mesh or point cloud")
    e.add_argument("input", type=Path)
    e.add_argument("output", type=Path)
    e.add_argument("--dump-config", type=Path, help="write the effective config here")
    _add_config_flags(e)

    d = sub.add_parser("decode", help="reconstruct a mesh or point cloud")
    d.add_argument("input", type=Path)
    d.add_argument("output", type=Path)
    d.add_argument("--r-mc", type=int, default=256)
    d.add_argument("--points", type=int, default=100_000)
    d.add_argument("--format", choices=["obj", "ply", "xyz"])
    d.add_argument("--mesh", action="store_true", help="write the extracted mesh (PLY/OBJ)")
    d.add_argument("--attributes", type=Path, help=f"attribute stream (default: sibling {ATTR_SUFFIX})")
    d.add_argument("--seed", type=int, default=0, help="surface sampling seed")

    v = sub.add_parser("eval", help="Chamfer distance (and color PSNR) between two shapes")
    v.add_argument("gt", type=Path)
    v.add_argument("rec", type=Path)
    v.add_argument("--points", type=int, default=100_000, help="samples drawn from meshes")
    v.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="rate-distortion sweep over widths or bitwidths")
    s.add_argument("input", type=Path)
    s.add_argument("--out", type=Path, default=Path("rd.csv"))
    s.add_argument("--svg", type=Path)
    s.add_argument("--ablate", nargs=2, metavar=("WHAT", "VALUES"),
                   help="'bitwidth 6,8,10,12' sweeps b at the fixed --width")
    s.add_argument("--workers", type=int, default=1, help="run sweep points in parallel")
    _add_config_flags(s)
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    over = {}
    for f in fields(RunConfig):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            over[f.name] = parse_value(f.name, raw)
    return cfg.replace(**over)


def _load(path: Path):
    try:
        return load_shape(path)
    except (OSError, GeometryError, ValueError) as exc:
        raise CommandError(EXIT_PARSE, f"cannot read {path}: {exc}") from None


def _announce_seeds(before: RunConfig, after: RunConfig) -> None:
    if before.param_seed is None or before.data_seed is None:
        print(f"seeds: param_seed={after.param_seed} data_seed={after.data_seed}",
              file=sys.stderr)


def cmd_encode(args) -> int:
    cfg = _config(args)
    if cfg.head != "default":
        raise CommandError(EXIT_CONFIG, "non-default heads cannot be stored in a bitstream")
    shape = _load(args.input)
    try:
        check_compatible(shape, cfg)
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    resolved = resolve_seeds(cfg)
    _announce_seeds(cfg, resolved)
    if args.dump_config:
        args.dump_config.write_text(resolved.dumps())
    threads = resolve_threads(cfg.threads)
    t0 = time.perf_counter()
    enc = encode_shape(shape, resolved, threads)
    enc.geometry.save(args.output)
    sizes = f"{enc.geometry.total_size_bytes}"
    if enc.attributes is not None:
        enc.attributes.save(attr_path(args.output))
        sizes += f" + {enc.attributes.total_size_bytes} (attributes)"
    print(f"wrote {args.output}: {sizes} bytes in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_decode(args) -> int:
    try:
        geo = CompressedField.load(args.input)
    except OSError as exc:
        raise CommandError(EXIT_PARSE, f"cannot read {args.input}: {exc}") from None
    apath = args.attributes or attr_path(args.input)
    attr = None
    if args.attributes or apath.exists():
        try:
            attr = CompressedField.load(apath)
        except OSError as exc:
            raise CommandError(EXIT_PARSE, f"cannot read {apath}: {exc}") from None
    if args.r_mc < 8 or args.points < 1:
        raise CommandError(EXIT_CONFIG, "--r-mc must be >= 8 and --points >= 1")
    try:
        mesh, pc = decode_streams(geo, attr, args.r_mc, args.points, args.seed)
    except ChecksumError as exc:
        raise CommandError(EXIT_CRC, f"{exc} (checksum at byte offset "
                                     f"{max(len(geo.data) - 4, 0)} of {len(geo.data)})") from None
    except BitstreamError as exc:
        raise CommandError(EXIT_CRC, f"corrupt stream: {exc}") from None
    except EmptySurfaceError as exc:
        raise CommandError(EXIT_EMPTY, str(exc)) from None
    fmt = args.format or args.output.suffix.lstrip(".").lower()
    if fmt == "obj" or args.mesh:
        if fmt == "xyz":
            raise CommandError(EXIT_CONFIG, "XYZ cannot hold a mesh")
        save_shape(args.output, mesh, fmt)
        print(f"wrote {args.output}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    else:
        save_shape(args.output, pc, fmt)
        print(f"wrote {args.output}: {len(pc)} points")
    return EXIT_OK


def _as_cloud(shape, n: int, seed: int) -> PointCloud:
    return sample_surface(shape, n, seed) if isinstance(shape, TriMesh) else shape


def cmd_eval(args) -> int:
    gt, rec = _load(args.gt), _load(args.rec)
    gt_local, norm = normalize(gt)
    rec_pts = _as_cloud(rec, args.points, args.seed + 1)
    rec_local = PointCloud(norm.apply(rec_pts.points), rec_pts.colors)
    gt_pc = _as_cloud(gt_local, args.points, args.seed)
    cd = chamfer(gt_pc, rec_local)
    psnr = ""
    if gt_pc.has_colors and rec_local.has_colors:
        psnr = f"{attribute_psnr(gt_pc, rec_local):.6f}"
    print("cd,psnr")
    print(f"{cd!r},{psnr}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    shape = _load(args.input)
    bitwidths = None
    widths = list(cfg.widths)
    if args.ablate:
        what, values = args.ablate
        if what != "bitwidth":
            raise CommandError(EXIT_CONFIG, f"unknown ablation {what!r}; only 'bitwidth'")
        bitwidths = parse_value("widths", values)
        widths = [cfg.width]
    try:
        check_compatible(shape, cfg)
    except ConfigError as exc:
        raise CommandError(EXIT_CONFIG, str(exc)) from None
    resolved = resolve_seeds(cfg)
    _announce_seeds(cfg, resolved)

    def report(pt):
        status = f"cd={pt.cd:.4g} bytes={pt.bytes}" if pt.ok else f"FAILED ({pt.error})"
        print(f"width={pt.width} b={pt.bitwidth}: {status}", file=sys.stderr)

    points = rd_sweep(shape, widths, resolved.kind, resolved, bitwidths, log_fn=report,
                      workers=max(args.workers, 1))
    write_rd_csv(points, args.out)
    if args.svg:
        write_rd_svg(points, args.svg)
    print(f"wrote {args.out}: {len(points)} rows")
    return EXIT_OK if any(p.ok for p in points) else EXIT_ALL_FAILED


_COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"nf3d {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"nf3d {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"nf3d {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
