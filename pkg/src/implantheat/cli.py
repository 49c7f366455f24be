"""Command-line interface.

Subcommands: make-mesh, solve-em, solve-seed, solve-coupled, compare,
check-ab.  Every scenario key takes a flag of the same dotted name, e.g.
``implantheat compare -c run.ini --exposure.dt_s 60 --output.dir out2``.
Exit code 0 on success; errors print one categorized line on stderr and
exit nonzero.  check-ab exits 0 when the limit holds and 2 when it is
exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import _SECTIONS, ScenarioConfig, apply_overrides, load_config
from .errors import ConfigError, ImplantHeatError
from .field_source import MU_0

__all__ = ["main"]


def _add_override_flags(parser: argparse.ArgumentParser):
    for section, spec_cls in _SECTIONS.items():
        for f in dataclasses.fields(spec_cls):
            parser.add_argument(f"--{section}.{f.name}", dest=f"{section}.{f.name}",
                                metavar="V", help=argparse.SUPPRESS)
    parser.add_argument("--set", action="append", default=[], metavar="SEC.KEY=V",
                        help="override any config key (repeatable)")


def _collect_config(args) -> ScenarioConfig:
    overrides = list(args.set)
    for section, spec_cls in _SECTIONS.items():
        for f in dataclasses.fields(spec_cls):
            val = getattr(args, f"{section}.{f.name}", None)
            if val is not None:
                overrides.append(f"{section}.{f.name}={val}")
    if args.config:
        return load_config(args.config, overrides)
    cfg = ScenarioConfig()
    apply_overrides(cfg, overrides)
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="implantheat",
        description="Eddy-current heating of thin wire implants: "
                    "seed and 3D-1D coupled thermal models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-mesh", help="tile the elementary cell into a segment file")
    p.add_argument("--pitch", type=float, default=1.5e-3, help="cell pitch (m)")
    p.add_argument("--side", type=float, default=0.093, help="square side (m)")
    p.add_argument("-o", "--out", required=True, help="output segment file")

    for name, fn_help in (("solve-em", "induced currents and branch losses"),
                          ("solve-seed", "seed (voxel forcing) thermal model"),
                          ("solve-coupled", "3D-1D coupled thermal model"),
                          ("compare", "run both thermal models and report")):
        p = sub.add_parser(name, help=fn_help)
        p.add_argument("-c", "--config", help="scenario INI file (defaults if omitted)")
        _add_override_flags(p)

    p = sub.add_parser("check-ab", help="field-frequency safety product check")
    p.add_argument("--h", type=float, help="peak field strength H (A/m)")
    p.add_argument("--b", type=float, help="peak flux density B (T); H = B/mu0")
    p.add_argument("--frequency", type=float, required=True, help="frequency (Hz)")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ImplantHeatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    from . import scenarios
    from .fileio import write_segments

    if args.command == "make-mesh":
        cell = scenarios.elementary_cell(args.pitch)
        segs = scenarios.tile_cranial_mesh(cell, args.side)
        write_segments(args.out, segs)
        print(f"wrote {len(segs)} segments to {args.out}")
        return 0

    if args.command == "check-ab":
        if (args.h is None) == (args.b is None):
            raise ConfigError("give exactly one of --h or --b")
        h = args.h if args.h is not None else args.b / MU_0
        result = scenarios.ab_limit_check(h, args.frequency)
        verdict = "PASS" if result.passed else "FAIL"
        print(f"{verdict}: H*f = {result.product:.4e} A/(m s), "
              f"margin {result.margin:.3f} of limit {scenarios.AB_LIMIT:.1e}")
        return 0 if result.passed else 2

    cfg = _collect_config(args)
    if args.command == "solve-em":
        summary = scenarios.run_em_study(cfg)
        print(f"loops: {summary['n_loops']}, total power: {summary['total_power_w']:.6e} W")
        return 0
    if args.command == "solve-seed":
        final = scenarios.run_seed_study(cfg)
        print(f"seed peak temperature increase: {final.values.max():.4f} degC "
              f"at t={final.time:.0f}s")
        return 0
    if args.command == "solve-coupled":
        final, diags = scenarios.run_coupled_study(cfg)
        print(f"coupled peak temperature increase: {final.theta3.values.max():.4f} degC; "
              f"continuity mismatch {diags[-1].mismatch:.2e}")
        return 0
    if args.command == "compare":
        report = scenarios.run_comparison(cfg, progress=lambda s: print(f"running {s}..."))
        print(f"peak seed {report.peak_seed:.4f} degC, coupled {report.peak_coupled:.4f} degC "
              f"({100 * report.peak_reduction:.1f}% reduction); "
              f"mismatch {report.mismatch:.2e}")
        return 0
    raise ConfigError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
