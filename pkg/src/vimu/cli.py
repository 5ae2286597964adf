"""Command-line interface.

Subcommands: synth-gen, run, distmap-fit, distmap-apply, evaluate, report.
Exit codes: 0 success, 1 config error, 2 data error, 3 partial failure
(some clips skipped).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import distmap, fileio, harlab, pipeline, report, synthgen

log = logging.getLogger("vimu")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_PARTIAL = 3


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="pipeline config JSON")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--log-level", default="info",
                   choices=["debug", "info", "warning", "error"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vimu",
                                 description="virtual IMU synthesis and evaluation")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    _common_flags(g)
    g.add_argument("--subjects", type=int, default=3)
    g.add_argument("--scenarios", default="still,walk,arm_wave")
    g.add_argument("--duration", type=float, default=10.0)
    g.add_argument("--camera", default="static", choices=synthgen.CAMERA_MODES)
    g.add_argument("--fps", type=float, default=15.0)
    g.add_argument("--image-size", default="96x72")
    g.add_argument("--pan-rate", type=float, default=12.0, help="deg/s for camera=pan")
    g.add_argument("--kp-noise-px", type=float, default=0.0)
    g.add_argument("--kp-dropout", type=float, default=0.0)
    g.add_argument("--placements", default=",".join(synthgen.DEFAULT_PLACEMENTS))

    r = sub.add_parser("run", help="run the pipeline on a dataset")
    _common_flags(r)
    r.add_argument("--dataset", type=Path, required=True, help="dataset.json manifest")

    df = sub.add_parser("distmap-fit", help="fit a distribution map virtual->real")
    _common_flags(df)
    df.add_argument("--virtual", type=Path, required=True, help="virtual IMU directory")
    df.add_argument("--real", type=Path, required=True, help="real IMU directory")
    df.add_argument("--budget-s", type=float, default=None,
                    help="per-class seconds of real data used for fitting")
    df.add_argument("--plot", action="store_true", help="render before/after histograms")

    da = sub.add_parser("distmap-apply", help="apply a distribution map to virtual IMU")
    _common_flags(da)
    da.add_argument("--map", type=Path, required=True, dest="map_path")
    da.add_argument("--virtual", type=Path, required=True)

    for name in ("evaluate", "report"):
        e = sub.add_parser(name, help=("run one protocol and write reports" if name == "evaluate"
                                       else "run several protocols and write a comparison"))
        _common_flags(e)
        e.add_argument("--real", type=Path, required=True, help="real IMU directory")
        e.add_argument("--virtual", type=Path, default=None, help="virtual IMU directory")
        if name == "evaluate":
            e.add_argument("--protocol", required=True, choices=harlab.PROTOCOLS)
        else:
            e.add_argument("--protocols", default="R2R,V2R,Mix2R")
        e.add_argument("--map-budget-s", type=float, default=None)
        e.add_argument("--no-mapping", action="store_true",
                       help="disable distribution mapping (ablation)")
        e.add_argument("--real-budget-s", type=float, default=None)
        e.add_argument("--mix-ratio", type=float, default=1.0)
        e.add_argument("--inject-gain", type=float, default=None)
        e.add_argument("--inject-offset", type=float, default=None)
    return ap


def _setup_logging(level: str):
    logging.basicConfig(level=getattr(logging, level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")


def cmd_synth_gen(args) -> int:
    try:
        w, h = (int(v) for v in args.image_size.lower().split("x"))
        spec = synthgen.GeneratorSpec(
            scenarios=tuple(s.strip() for s in args.scenarios.split(",") if s.strip()),
            subjects=args.subjects,
            duration_s=args.duration,
            camera=args.camera,
            fps=args.fps,
            image_width=w,
            image_height=h,
            pan_rate_deg_s=args.pan_rate,
            seed=args.seed,
            noise=synthgen.GeneratorNoise(keypoint_px=args.kp_noise_px,
                                          keypoint_dropout=args.kp_dropout),
            placements=tuple(p.strip() for p in args.placements.split(",") if p.strip()),
        )
    except ValueError as exc:
        log.error("invalid generator options: %s", exc)
        return EXIT_CONFIG
    dataset = synthgen.generate_synthetic(args.out, spec)
    log.info("generated %d clips under %s", len(dataset["clips"]), args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        config = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
        if args.seed is not None:
            config.seed = args.seed
    except pipeline.ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    try:
        summary = pipeline.run_pipeline(args.dataset, config, args.out, workers=args.workers)
    except pipeline.DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    log.info("processed %d clips, %d failed; provenance at %s",
             summary.processed, summary.failed, summary.provenance_path)
    if summary.failed and summary.processed:
        return EXIT_PARTIAL
    if summary.failed:
        return EXIT_DATA
    return EXIT_OK


def _load_windows(args, need_virtual: bool):
    real = pipeline.load_imu_dir(args.real)
    virtual = []
    if args.virtual is not None:
        virtual = pipeline.load_imu_dir(args.virtual)
    elif need_virtual:
        raise pipeline.DataError("--virtual is required for this protocol")
    if args.inject_gain is not None or args.inject_offset is not None:
        gain = args.inject_gain if args.inject_gain is not None else 1.0
        offset = args.inject_offset if args.inject_offset is not None else 0.0
        virtual = pipeline.inject_domain_shift(virtual, gain, offset)
    return real + virtual


def _loso_options(args) -> harlab.LosoOptions:
    if args.no_mapping:
        map_budget = None
    else:
        map_budget = args.map_budget_s
    return harlab.LosoOptions(seed=args.seed, map_budget_s=map_budget,
                              real_budget_s=args.real_budget_s,
                              mix_virtual_ratio=args.mix_ratio)


def _check_mapping_flags(args, protocol: str) -> None:
    if protocol in ("V2R", "Mix2R") and not args.no_mapping:
        if args.map_budget_s is None:
            raise pipeline.ConfigError(
                f"{protocol} needs --map-budget-s > 0 (mapping requires real data), "
                "or --no-mapping to skip distribution mapping explicitly")
        if args.map_budget_s <= 0:
            raise pipeline.ConfigError("--map-budget-s must be positive; mapping "
                                       "requires a non-empty real budget")


def cmd_evaluate(args) -> int:
    try:
        _check_mapping_flags(args, args.protocol)
        windows = _load_windows(args, need_virtual=args.protocol in ("V2R", "Mix2R"))
        grid = harlab.GridSpec()
        rep = harlab.evaluate_loso(windows, args.protocol, grid=grid,
                                   options=_loso_options(args))
    except pipeline.ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (pipeline.DataError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    paths = report.write_report(rep, args.out)
    log.info("mean macro F1 = %.4f; report at %s", rep.mean_f1, paths["json"])
    print(f"{args.protocol}: mean macro F1 = {rep.mean_f1:.4f} "
          f"wilson [{rep.wilson_low:.4f}, {rep.wilson_high:.4f}]")
    return EXIT_OK


def cmd_report(args) -> int:
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    reports = []
    try:
        for protocol in protocols:
            if protocol not in harlab.PROTOCOLS:
                raise pipeline.ConfigError(f"unknown protocol {protocol!r}")
            _check_mapping_flags(args, protocol)
            windows = _load_windows(args, need_virtual=protocol in ("V2R", "Mix2R"))
            rep = harlab.evaluate_loso(windows, protocol, grid=harlab.GridSpec(),
                                       options=_loso_options(args))
            report.write_report(rep, args.out)
            reports.append(rep)
    except pipeline.ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (pipeline.DataError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    report.plot_protocol_comparison(Path(args.out) / "protocol_comparison.png", reports)
    for rep in reports:
        print(f"{rep.protocol}: mean macro F1 = {rep.mean_f1:.4f} "
              f"wilson [{rep.wilson_low:.4f}, {rep.wilson_high:.4f}]")
    return EXIT_OK


def cmd_distmap_fit(args) -> int:
    try:
        virtual = pipeline.load_imu_dir(args.virtual)
        real = pipeline.load_imu_dir(args.real)
        if args.budget_s is not None:
            if args.budget_s <= 0:
                raise pipeline.ConfigError("--budget-s must be positive")
            budget = harlab.windows_for_seconds(args.budget_s)
            real = harlab.mix_datasets(real, [], budget, 0, args.seed)
        dmap = harlab.fit_window_map(virtual, real)
    except pipeline.ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (pipeline.DataError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    out_path = Path(args.out) / "distribution_map.json"
    distmap.save_map(dmap, out_path)
    log.info("distribution map written to %s", out_path)
    if args.plot:
        mapped = harlab.apply_window_map(dmap, virtual)
        pooled_v = harlab.pool_channel_samples(virtual)
        pooled_m = harlab.pool_channel_samples(mapped)
        pooled_r = harlab.pool_channel_samples(real)
        for channel in list(pooled_v)[:4]:
            fig_path = Path(args.out) / f"mapping_{channel.replace('.', '_')}.png"
            report.plot_mapping_histograms(fig_path, pooled_v[channel],
                                           pooled_m[channel], pooled_r[channel], channel)
    return EXIT_OK


def cmd_distmap_apply(args) -> int:
    try:
        dmap = distmap.load_map(args.map_path)
        metas = sorted(Path(args.virtual).glob("*.meta.json"))
        if not metas:
            raise pipeline.DataError(f"no IMU streams under {args.virtual}")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for meta_path in metas:
            meta = fileio.read_json(meta_path)
            csv_path = meta_path.with_name(meta_path.name.replace(".meta.json", ".csv"))
            t, accel, gyro, mag = fileio.read_imu_csv(csv_path)
            arrays = {"accel": accel, "gyro": gyro, "mag": mag}
            for kind, arr in arrays.items():
                for ax_i, ax_name in enumerate("xyz"):
                    channel = f"{meta['placement']}.{kind}.{ax_name}"
                    if channel in dmap.channels:
                        arr[:, ax_i] = distmap.apply_map(dmap, arr[:, ax_i], channel)
            fileio.write_imu_csv(out_dir / csv_path.name, t, accel, gyro, mag)
            fileio.write_json(out_dir / meta_path.name, meta)
    except (pipeline.DataError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    log.info("mapped %d streams into %s", len(metas), args.out)
    return EXIT_OK


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "distmap-fit": cmd_distmap_fit,
    "distmap-apply": cmd_distmap_apply,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
