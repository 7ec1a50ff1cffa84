"""Command-line interface: ``dazzlesim <subcommand> [options]``.

Every run writes ``run.json`` to its output directory with the full
configuration, seed, argument vector and ``git describe`` of the source tree.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io, plotting
from .config import ConfigError, SimConfig, desk_config, full_config, load_config

log = logging.getLogger("dazzlesim")

RUN_SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _config(args) -> SimConfig:
    chosen = [bool(args.config), args.desk, args.full]
    if sum(chosen) == 0:
        raise UsageError("a configuration is required: pass --config FILE, --desk or --full")
    if sum(chosen) > 1:
        raise UsageError("--config, --desk and --full are mutually exclusive")
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} does not exist")
        cfg = load_config(args.config)
    elif args.desk:
        cfg = desk_config()
    else:
        cfg = full_config()
    if args.seed is not None:
        cfg = cfg.replace(rng_seed=args.seed)
    elif "DAZZLESIM_SEED" in os.environ and not args.config:
        cfg = cfg.replace(rng_seed=int(os.environ["DAZZLESIM_SEED"]))
    if cfg.pupil_res[0] * cfg.pupil_res[1] > 1024 ** 2:
        nx, ny = cfg.sensor_res
        gb = (4 * nx * ny * cfg.n_bands * 8 + 2 * nx * cfg.pupil_res[0] * 16) / 1e9
        log.warning("full-resolution run: expect roughly %.1f GB of working memory", gb)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, args, cfg: SimConfig, outputs: list) -> None:
    io.write_json(out / "run.json", {
        "schema_version": RUN_SCHEMA_VERSION, "command": args.command, "argv": sys.argv[1:],
        "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.rng_seed,
        "threads": args.threads, "git_describe": _git_describe(), "version": _version(),
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    })


def _mask(spec: str | None, cfg: SimConfig):
    from .optics import HeightMap, half_ring_mask

    if spec in (None, "flat"):
        return HeightMap.flat(cfg)
    if spec == "half-ring":
        return half_ring_mask(cfg)
    try:
        h = io.load_heightmap(spec)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad mask file {spec}: {exc}") from exc
    if h.shape != cfg.pupil_res[::-1] or not np.isclose(h.pitch, cfg.pupil_pitch):
        raise UsageError(f"mask {spec} does not match the configured pupil grid")
    return h


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_history(path: Path, history: list[dict]) -> Path:
    keys = ["iter", "l_doe", "l_doe_smooth", "mean_lsr", "mean_bsr", "best_l_doe", "lr"]
    return _write_csv(path, keys, ([r[k] for k in keys] for r in history))


# -- subcommands ---------------------------------------------------------------

def cmd_psf(args, cfg, out):
    from .metrics import suppression_report
    from .optics import HeightMap, build_psf_stack

    h = _mask(args.mask, cfg)
    stack = build_psf_stack(h, cfg, args.threads)
    flat = build_psf_stack(HeightMap.flat(cfg), cfg, args.threads)
    rep = suppression_report(stack, flat)
    files = [
        io.save_cube(out / "psf", _psf_cube(stack), {"pitch": stack.pitch}),
        out / "psf.json",
        plotting.psf_montage(stack, out / "psf_montage.png"),
        plotting.mask_image(h, out / "mask.png"),
        _write_csv(out / "psf_summary.csv", ["wavelength_nm", "peak", "energy", "lsr", "bsr"],
                   zip(rep.wavelengths_nm, stack.peaks, stack.energy, rep.lsr, rep.bsr)),
    ]
    return files


def _psf_cube(stack):
    from .spectral import SpectralCube

    return SpectralCube(np.moveaxis(stack.psf, 0, 2), stack.grid)


def cmd_simulate(args, cfg, out):
    from .camera import Camera, IlluminationSpec, LaserSpec, NoiseSpec
    from .config import rng_for
    from .datagen import crop_scene, synthetic_scene
    from .restore import Restorer
    from .spectral import lift_rgb_to_hsi

    h = _mask(args.mask, cfg)
    shape = (cfg.sensor_res[1], cfg.sensor_res[0])
    if args.scene:
        rgb, _ = crop_scene(io.read_scene(args.scene), shape, rng_for(cfg.rng_seed, 1))
    else:
        rgb = synthetic_scene(rng_for(cfg.rng_seed, 2), shape)
    noise = NoiseSpec.from_config(cfg) if not args.no_noise else NoiseSpec.disabled(cfg)
    laser = LaserSpec(args.lambda_l * 1e-9, args.alpha_l, tuple(args.n_l))
    cam = Camera(cfg, h, threads=args.threads)
    s = cam.expose(lift_rgb_to_hsi(rgb, cfg.grid), laser, IlluminationSpec(args.alpha_b), noise,
                   cfg.rng_seed, args.exposure)
    restorer = Restorer(cfg, h, psf=cam.psf)
    files = [io.save_sensor_image(out / "sensor.png", s), out / "sensor.json"]
    io.write_scene(out / "gt.png", rgb)
    files.append(out / "gt.png")
    files.append(plotting.image_row({"ground truth": rgb, "sensor": restorer.raw(s)},
                                    out / "preview.png"))
    return files


def cmd_optimize(args, cfg, out):
    from .doe_opt import StageSchedule, optimize_doe
    from .optics import build_psf_stack

    sched = StageSchedule(stage1_iters=args.iters, lr=args.lr)
    init = io.load_heightmap(args.init) if args.init else None
    mask, history = optimize_doe(init, sched, cfg, threads=args.threads)
    report = _suppression(mask, cfg, args.threads)
    files = [io.save_heightmap(out / "mask", mask), out / "mask.json",
             _write_history(out / "history.csv", history)]
    io.write_json(out / "report.json", {"mask_hash": mask.hash(), "iterations": args.iters,
                                        "lr": args.lr, **report})
    files.append(out / "report.json")
    if history:
        files.append(plotting.history_plot(history, out / "history.png"))
    files.append(plotting.mask_image(mask, out / "mask.png"))
    files.append(plotting.psf_montage(build_psf_stack(mask, cfg, args.threads),
                                      out / "psf_montage.png"))
    return files


def _suppression(mask, cfg, threads):
    from .metrics import l_doe, suppression_report
    from .optics import HeightMap, build_psf_stack, half_ring_mask

    flat = build_psf_stack(HeightMap.flat(cfg), cfg, threads)
    coded = build_psf_stack(mask, cfg, threads)
    ring = build_psf_stack(half_ring_mask(cfg), cfg, threads)
    return {"suppression": suppression_report(coded, flat).to_dict(),
            "l_doe": l_doe(coded, flat),
            "half_ring": suppression_report(ring, flat).to_dict()}


def _load_scene_list(scene_dir, cfg, n_default: int, seed: int):
    from .config import rng_for
    from .datagen import crop_scene, list_scenes, synthetic_scene

    shape = (cfg.sensor_res[1], cfg.sensor_res[0])
    if scene_dir:
        return [crop_scene(io.read_scene(p), shape, rng_for(seed, 3 + k))[0]
                for k, p in enumerate(list_scenes(scene_dir))]
    return [synthetic_scene(rng_for(seed + 1, k), shape) for k in range(n_default)]


def cmd_two_stage(args, cfg, out):
    from .doe_opt import StageSchedule, run_two_stage

    sched = StageSchedule(stage1_iters=args.iters, stage2_iters=args.stage2_iters, lr=args.lr)
    val = _load_scene_list(args.val_scenes, cfg, args.n_val, cfg.rng_seed)
    mask, params, report = run_two_stage(cfg, sched, val, threads=args.threads)
    io.write_json(out / "restore_params.json", params.to_dict())
    io.write_json(out / "report.json", report)
    files = [io.save_heightmap(out / "mask", mask), out / "mask.json",
             out / "restore_params.json", out / "report.json",
             _write_csv(out / "stage2_trace.csv", ["step", "wiener_r", "wiener_g", "wiener_b",
                                                   "inpaint_iters", "charbonnier_fft"],
                        ([i, *t["params"]["wiener_reg"], t["params"]["inpaint_iters"],
                          t["charbonnier_fft"]] for i, t in enumerate(report["stage2"]["trace"]))),
             plotting.mask_image(mask, out / "mask.png")]
    return files


def cmd_synth(args, cfg, out):
    from .datagen import ScenarioDistribution, synth_dataset

    h = _mask(args.mask, cfg)
    dist = ScenarioDistribution.from_config(cfg, literal_shift=args.literal_shift,
                                            literal_c1=args.literal_c1)
    m = synth_dataset(args.scenes, h, dist, args.n, out, cfg, downsample=args.downsample,
                      threads=args.threads)
    return _dataset_files(m, out)


def _dataset_files(m, out):
    files = [out / "manifest.jsonl", out / "mask.f32", out / "mask.json"]
    for it in m.items:
        files += [out / it["files"]["sensor"], out / Path(it["files"]["sensor"]).with_suffix(".json"),
                  out / it["files"]["gt"]]
    return files


def cmd_test_grid(args, cfg, out):
    from .datagen import test_grid

    m = test_grid(args.scenes, _mask(args.mask, cfg), cfg, out, threads=args.threads)
    return _dataset_files(m, out)


def cmd_eval(args, cfg, out):
    from .datagen import DatasetManifest, evaluate_manifest
    from .restore import RestoreParams

    try:
        m = DatasetManifest.read(args.manifest)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from exc
    cfg = m.config()
    mask = _mask(args.mask, cfg) if args.mask else m.load_mask()
    params = RestoreParams.from_dict(io.read_json(args.params)) if args.params else None
    report = evaluate_manifest(m, mask, cfg, params)
    io.write_json(out / "eval.json", report)
    keys = ["restored_l1", "raw_l1", "restored_psnr", "raw_psnr", "restored_charbonnier"]
    _write_csv(out / "eval.csv", ["alpha_l", "count", *keys],
               ([a, s["count"], *[s[k] for k in keys]] for a, s in report["strata"].items()))
    return [out / "eval.json", out / "eval.csv"]


def cmd_grad_check(args, cfg, out):
    from .doe_opt import finite_difference_check

    results = [finite_difference_check(cfg, s, n_dirs=args.dirs, step=args.step)
               for s in args.seeds]
    worst = max(r["max_rel_error"] for r in results)
    io.write_json(out / "grad_check.json", {"step": args.step, "results": results,
                                            "max_rel_error": worst})
    _write_csv(out / "grad_check.csv", ["seed", "direction", "rel_error"],
               ([r["seed"], i, e] for r in results for i, e in enumerate(r["rel_errors"])))
    print(f"max relative error {worst:.3e}")
    return [out / "grad_check.json", out / "grad_check.csv"]


def cmd_lsr_table(args, cfg, out):
    from .metrics import suppression_report
    from .optics import HeightMap, build_psf_stack

    if not args.masks:
        raise UsageError("lsr-table needs at least one mask")
    flat = build_psf_stack(HeightMap.flat(cfg), cfg, args.threads)
    nm = [f"{x:.0f}" for x in cfg.grid.nm]
    header = ["mask"] + [f"lsr_{w}nm" for w in nm] + [f"bsr_{w}nm" for w in nm]
    rows, curves = [], {}
    for spec in args.masks:
        rep = suppression_report(build_psf_stack(_mask(spec, cfg), cfg, args.threads), flat)
        name = Path(spec).stem if spec not in ("flat", "half-ring") else spec
        rows.append([name, *rep.lsr, *rep.bsr])
        curves[name] = rep.lsr
    files = [_write_csv(out / "lsr_table.csv", header, rows),
             plotting.lsr_plot(cfg.grid.nm, curves, out / "lsr.png")]
    return files


def cmd_scenes(args, cfg, out):
    from .datagen import write_scene_set

    shape = (cfg.sensor_res[1], cfg.sensor_res[0]) if args.size is None else (args.size,) * 2
    return write_scene_set(out, args.n, shape, cfg.rng_seed)


COMMANDS = {
    "psf": cmd_psf, "simulate": cmd_simulate, "optimize": cmd_optimize,
    "two-stage": cmd_two_stage, "synth": cmd_synth, "test-grid": cmd_test_grid,
    "eval": cmd_eval, "grad-check": cmd_grad_check, "lsr-table": cmd_lsr_table,
    "scenes": cmd_scenes,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--desk", action="store_true", help="128x128, 5-band desk configuration")
    common.add_argument("--full", action="store_true", help="full-resolution configuration")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory (created if absent)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker pool size")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dazzlesim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("psf", parents=[common], help="PSF stack, montage and mask image")
    s.add_argument("--mask", help="mask file, 'flat' or 'half-ring'")

    s = sub.add_parser("simulate", parents=[common], help="simulate one capture")
    s.add_argument("--mask")
    s.add_argument("--scene", help="scene image (default: synthetic)")
    s.add_argument("--alpha-l", type=float, default=0.0)
    s.add_argument("--lambda-l", type=float, default=550.0, help="laser wavelength (nm)")
    s.add_argument("--n-l", type=float, nargs=2, default=(0.0, 0.0))
    s.add_argument("--alpha-b", type=float, default=0.7)
    s.add_argument("--exposure", type=float, help="exposure time (s)")
    s.add_argument("--no-noise", action="store_true")

    s = sub.add_parser("optimize", parents=[common], help="stage-1 DOE optimisation")
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--lr", type=float, default=0.02)
    s.add_argument("--init", help="initial mask file")

    s = sub.add_parser("two-stage", parents=[common], help="DOE optimisation + restore tuning")
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--stage2-iters", type=int, default=24)
    s.add_argument("--lr", type=float, default=0.02)
    s.add_argument("--val-scenes", help="directory of validation scenes")
    s.add_argument("--n-val", type=int, default=4, help="synthetic validation scenes")

    s = sub.add_parser("synth", parents=[common], help="synthesise a random dataset")
    s.add_argument("--scenes", required=True)
    s.add_argument("--mask")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--downsample", type=int)
    s.add_argument("--literal-shift", action="store_true")
    s.add_argument("--literal-c1", action="store_true")

    s = sub.add_parser("test-grid", parents=[common], help="fixed evaluation grid")
    s.add_argument("--scenes", required=True)
    s.add_argument("--mask")

    s = sub.add_parser("eval", parents=[common], help="restore and score a dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mask", help="defaults to the dataset's own mask")
    s.add_argument("--params", help="restore parameter JSON")

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--dirs", type=int, default=20)
    s.add_argument("--step", type=float, default=1e-9)

    s = sub.add_parser("lsr-table", parents=[common], help="LSR/BSR per wavelength per mask")
    s.add_argument("masks", nargs="+", help="mask files, 'flat' or 'half-ring'")

    s = sub.add_parser("scenes", parents=[common], help="write synthetic scene images")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--size", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and not (args.config or args.desk or args.full):
        args.desk = True  # the manifest carries its own configuration
    try:
        cfg = _config(args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        out = _out(args)
        files = COMMANDS[args.command](args, cfg, out)
        missing = [str(f) for f in files if not Path(f).exists()]
        if missing:
            print("outputs not written: " + ", ".join(missing), file=sys.stderr)
            return 1
        _write_run(out, args, cfg, files)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dazzlesim: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"dazzlesim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
