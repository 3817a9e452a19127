"""
Command-line entry point.

    nvbridge scan      reset / standard PC scans of a scene
    nvbridge depth     reset depth scan (y versus objective position)
    nvbridge discharge charge released versus NV illumination time
    nvbridge sweep     steady NV-spot current over main and aux power
    nvbridge contrast  PL and PC contrast over main or aux power
    nvbridge fit       fit a power-sweep table
    nvbridge demo      regenerate the acceptance artifacts

Results go to files; diagnostics go to stderr.  Exit status: 0 success,
1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, fileio
from .config import ConfigError, load_config
from .fitting import FitOptions, fit_model, synthetic_sweep
from .model import ModelParams
from .scan import (Axis, ScanPlan, charge_vs_time, dark_spots, half_widths, run_contrast_sweep,
                   run_decay, run_depth_scan, run_power_sweep, run_reset_scan, run_standard_scan)

# generator of the shipped power sweep (main x aux)
SWEEP_TRUTH = ModelParams(a=2, b=2, c=2, d=1, B_max=2.0, g_nv=1.0, kappa_rec=0.01)
SWEEP_JS0 = 0.5
SWEEP_MAIN = tuple(np.geomspace(0.2, 6.0, 10))
SWEEP_AUX = (0.0, 0.5, 1.0, 2.0)
DEMO_TARGETS = ("maps", "depth", "decay", "discharge", "contrast", "sweep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _axis(text: str) -> Axis:
    try:
        name, start, stop, pitch = text.split(":")
        return Axis(name, float(start), float(stop), float(pitch))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"axis must be name:start:stop:pitch ({exc})") from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvbridge", description="NV / Bridge / Source photocurrent simulator")
    p.add_argument("--version", action="version", version=f"nvbridge {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scene_args(sp):
        sp.add_argument("--scene", required=True, help="scene file or shipped scene name")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--noise", type=float, default=None, help="Gaussian current noise sigma (pA)")
        sp.add_argument("--bias", type=float, default=None, help="Source bias (V)")

    def grid_args(sp):
        sp.add_argument("--rows", type=_axis, default=None, help="name:start:stop:pitch")
        sp.add_argument("--cols", type=_axis, default=None, help="name:start:stop:pitch")
        sp.add_argument("--order", choices=("row", "column", "random"), default=None)
        sp.add_argument("--settle", type=float, default=None, help="settle time per pixel (s)")
        sp.add_argument("--threshold", type=float, default=None, help="reset threshold fraction")
        sp.add_argument("--restore", choices=("ideal", "carry"), default=None)
        sp.add_argument("--format", default="tsv", help="comma list of tsv, pgm")
        sp.add_argument("--name", default=None, help="output file stem")

    sp = sub.add_parser("scan", help="reset or standard PC scan")
    scene_args(sp)
    grid_args(sp)
    sp.add_argument("--plan", choices=("reset", "standard"), default="reset")

    sp = sub.add_parser("depth", help="reset depth scan")
    scene_args(sp)
    grid_args(sp)

    sp = sub.add_parser("discharge", help="charge versus NV illumination time")
    scene_args(sp)
    sp.add_argument("--times", type=_floats, default=(0, 0.5, 1, 2, 4, 8, 16), help="illumination times (s)")
    sp.add_argument("--spikes", action="store_true", help="also write each spike trace")

    sp = sub.add_parser("sweep", help="power sweep at the NV spot")
    scene_args(sp)
    sp.add_argument("--main", type=_floats, default=None, help="main powers (mW)")
    sp.add_argument("--aux", type=_floats, default=None, help="aux powers (mW)")

    sp = sub.add_parser("contrast", help="PL/PC contrast sweep")
    scene_args(sp)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--main", type=_floats, default=None, help="main powers (mW), aux off")
    g.add_argument("--aux", type=_floats, default=None, help="aux powers (mW) at the scene laser power")

    sp = sub.add_parser("fit", help="fit a sweep table")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default="fit_report.json")
    sp.add_argument("--starts", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("demo", help="regenerate acceptance artifacts")
    sp.add_argument("targets", nargs="*", metavar="target", help=f"any of {', '.join(DEMO_TARGETS)} (default all)")
    sp.add_argument("--out", default="demo_out")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _plan(args, scene_plan: ScanPlan | None, kind: str) -> ScanPlan:
    plan = scene_plan or ScanPlan(kind=kind)
    changes = {"kind": kind}
    for attr, key in (("seed", "seed"), ("noise", "noise_sigma"), ("bias", "bias"), ("rows", "rows"),
                      ("cols", "cols"), ("order", "order"), ("settle", "settle_time"),
                      ("threshold", "reset_threshold"), ("restore", "restore")):
        v = getattr(args, attr, None)
        if v is not None:
            changes[key] = v
    if kind == "depth_reset" and "rows" not in changes and plan.rows.name != "z" and plan.cols.name != "z":
        changes["rows"] = Axis("z", -5.0, 40.0, 1.0)
        changes["cols"] = Axis("y", -20.0, 20.0, 1.0)
    return replace(plan, **changes)


def _formats(text: str) -> tuple[str, ...]:
    fmts = tuple(f.strip() for f in text.split(",") if f.strip())
    bad = set(fmts) - {"tsv", "pgm"}
    if bad or not fmts:
        raise UsageError(f"unknown format(s): {sorted(bad) or text!r}")
    return fmts


def cmd_scan(args, depth: bool = False) -> None:
    scene, scene_plan = load_config(args.scene)
    fmts = _formats(args.format)
    kind = "depth_reset" if depth else args.plan
    plan = _plan(args, scene_plan, kind)
    if depth:
        res = run_depth_scan(scene, plan)
    elif kind == "standard":
        res = run_standard_scan(scene, plan)
    else:
        res = run_reset_scan(scene, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / (args.name or f"{scene.name}_{kind}")
    for f in fileio.write_map(res, stem, fmts):
        _log(f"wrote {f}")
    if res.timed_out.any():
        _log(f"warning: {int(res.timed_out.sum())} pixel(s) hit the tau cap of {plan.tau_cap} s")


def cmd_discharge(args) -> None:
    scene, scene_plan = load_config(args.scene)
    plan = _plan(args, scene_plan, "discharge")
    recs = charge_vs_time(scene, plan, args.times)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(r.illumination_time, r.integrated_charge, r.B_start, r.B_end, r.J_nv, r.conservation_error())
            for r in recs]
    f = fileio.write_table(out / f"{scene.name}_discharge.tsv",
                           ["t_illum_s", "charge_pC", "B_start", "B_end", "J_nv_pA", "conservation_rel_err"],
                           rows, {"scene": scene.name, "scene_hash": scene.digest(), "q_scale": plan.q_scale},
                           title="discharge")
    _log(f"wrote {f}")
    if args.spikes:
        for r in recs:
            f = fileio.write_table(out / f"{scene.name}_spike_t{r.illumination_time!r}.tsv", ["t_s", "I_pA"],
                                   np.column_stack([r.spike_t, r.spike_I]), title="spike")
            _log(f"wrote {f}")


def cmd_sweep(args) -> None:
    scene, scene_plan = load_config(args.scene)
    plan = _plan(args, scene_plan, "power_sweep")
    main = args.main or plan.main_powers or tuple(np.geomspace(0.1, 10, 9))
    aux = args.aux or plan.aux_powers or (0.0,)
    table = run_power_sweep(scene, plan, main, aux)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    f = fileio.write_table(out / f"{scene.name}_power_sweep.tsv", ["P_main_mW", "P_aux_mW", "J_pA"], table,
                           {"scene": scene.name, "scene_hash": scene.digest(), "bias_V": plan.bias},
                           title="power_sweep")
    _log(f"wrote {f}")


def _contrast_rows(rows):
    return [(m, a, c.C_PL, c.C_PC, c.intercept_B, c.J_off, c.J_on) for m, a, c in rows]


CONTRAST_COLUMNS = ["P_main_mW", "P_aux_mW", "C_PL", "C_PC", "intercept_B_pA", "J_off_pA", "J_on_pA"]


def cmd_contrast(args) -> None:
    scene, scene_plan = load_config(args.scene)
    plan = _plan(args, scene_plan, "contrast_sweep")
    if args.main is None and args.aux is None:
        if plan.aux_powers:
            rows = run_contrast_sweep(scene, plan, aux_powers=plan.aux_powers)
        else:
            rows = run_contrast_sweep(scene, plan, main_powers=plan.main_powers or (scene.optics.laser_power,))
    elif args.main is not None:
        rows = run_contrast_sweep(scene, plan, main_powers=args.main)
    else:
        rows = run_contrast_sweep(scene, plan, aux_powers=args.aux)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    f = fileio.write_table(out / f"{scene.name}_contrast.tsv", CONTRAST_COLUMNS, _contrast_rows(rows),
                           {"scene": scene.name, "scene_hash": scene.digest()}, title="contrast")
    _log(f"wrote {f}")


def cmd_fit(args) -> None:
    data = fileio.read_dataset(args.data)
    report = fit_model(data, options=FitOptions(starts=args.starts, seed=args.seed))
    f = fileio.write_report(args.out, report)
    b = report.best
    _log(f"best exponents (a,b,c,d) = ({b.a:g},{b.b:g},{b.c:g},{b.d:g}), weighted RMS {report.residual:.4g}")
    _log(f"wrote {f}")


# ---------------------------------------------------------------- demo

def demo(out: Path, targets, seed: int = 0) -> dict:
    """Regenerate the acceptance artifacts under ``out``; returns the summary."""
    out.mkdir(parents=True, exist_ok=True)
    targets = DEMO_TARGETS if "all" in targets else tuple(targets)
    summary = {}
    if "maps" in targets:
        for name in ("sample_m", "sample_m_near"):
            scene, plan = load_config(name)
            plan = replace(plan, seed=seed)
            res = run_reset_scan(scene, plan)
            fileio.write_map(res, out / name, ("tsv", "pgm"))
            n, cent = dark_spots(res.reaction_map, res.metadata["J_ref"])
            c = run_contrast_sweep(scene, plan, main_powers=[scene.optics.laser_power])[0][2]
            summary[name] = {"dark_spots": n, "centroids_px": cent, "C_PC": c.C_PC}
    if "depth" in targets:
        scene, plan = load_config("depth_single")
        res = run_depth_scan(scene, replace(plan, seed=seed))
        fileio.write_map(res, out / "depth_single", ("tsv", "pgm"))
        i = int(np.argmax(np.max(res.reset_map, axis=1)))
        widths = half_widths(res.reset_map, res.col_values)
        fileio.write_table(out / "depth_single_widths.tsv", ["objective_z_um", "focus_depth_um", "fwhm_um"],
                           np.column_stack([res.row_values, res.metadata["focus_depth"], widths]), title="depth")
        summary["depth_single"] = {"peak_objective_z": float(res.row_values[i])}
    if "decay" in targets:
        scene, plan = load_config("sample_g")
        rec = run_decay(scene, plan, plan.probe, 60.0)
        fileio.write_table(out / "sample_g_decay.tsv", ["t_s", "J_pA"], np.column_stack([rec.t, rec.J]),
                           {"t_one_percent_s": rec.t_one_percent}, title="decay")
        summary["sample_g"] = {"t_one_percent": rec.t_one_percent}
    if "discharge" in targets:
        scene, plan = load_config("discharge")
        recs = charge_vs_time(scene, plan, (0, 0.5, 1, 2, 3, 4, 6, 8, 12, 16))
        fileio.write_table(out / "discharge.tsv",
                           ["t_illum_s", "charge_pC", "B_start", "B_end", "J_nv_pA", "conservation_rel_err"],
                           [(r.illumination_time, r.integrated_charge, r.B_start, r.B_end, r.J_nv,
                             r.conservation_error()) for r in recs], title="discharge")
        summary["discharge"] = {"max_conservation_error": max(r.conservation_error() for r in recs)}
    if "contrast" in targets:
        scene, plan = load_config("calibration")
        rows = run_contrast_sweep(scene, plan, main_powers=plan.main_powers)
        fileio.write_table(out / "calibration_contrast.tsv", CONTRAST_COLUMNS, _contrast_rows(rows), title="contrast")
        at = [c for m, _, c in rows if m == scene.optics.laser_power][0]
        summary["calibration"] = {"C_PL": at.C_PL, "C_PC": at.C_PC}
        scene, plan = load_config("aux_enhancement")
        rows = run_contrast_sweep(scene, plan, aux_powers=plan.aux_powers)
        fileio.write_table(out / "aux_contrast.tsv", CONTRAST_COLUMNS, _contrast_rows(rows), title="contrast")
        summary["aux_enhancement"] = {"C_PC_aux0": rows[0][2].C_PC, "C_PC_max": max(c.C_PC for *_, c in rows)}
    if "sweep" in targets:
        data = synthetic_sweep(SWEEP_TRUTH, SWEEP_JS0, SWEEP_MAIN, SWEEP_AUX, noise=0.01, seed=seed)
        fileio.write_dataset(out / "power_sweep.tsv", data)
        report = fit_model(data)
        fileio.write_report(out / "power_sweep_fit.json", report)
        summary["fit"] = {"exponents": list(report.best.exponents), "B_max": report.best.B_max}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_demo(args) -> None:
    bad = set(args.targets) - set(DEMO_TARGETS) - {"all"}
    if bad:
        raise UsageError(f"nvbridge demo: error: unknown target(s) {sorted(bad)}")
    summary = demo(Path(args.out), args.targets or ["all"], args.seed)
    for k, v in summary.items():
        _log(f"{k}: {json.dumps(v)}")


COMMANDS = {
    "scan": cmd_scan,
    "depth": lambda a: cmd_scan(a, depth=True),
    "discharge": cmd_discharge,
    "sweep": cmd_sweep,
    "contrast": cmd_contrast,
    "fit": cmd_fit,
    "demo": cmd_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        _log(str(exc))
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ConfigError, OSError, ValueError, RuntimeError, KeyError) as exc:
        _log(f"nvbridge: error: {exc}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
