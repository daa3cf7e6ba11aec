"""Command-line interface.

Exit codes: 0 success, 1 validation / metric / configuration failure,
2 usage error. Every command writes its resolved arguments next to its
outputs as ``<output>.run.json`` so a run can be repeated exactly.
``FLOWGUIDE_OUTPUT_DIR`` sets the directory for outputs given as bare names.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import FeatureVideo
from .diffusion import ConfigurationError, InjectionCache
from .flow import (
    FlowField,
    FlowFormatError,
    FlowSequence,
    FlowValidationError,
    downsample_flow,
    load_flo,
    perturb_flow,
    synth_flow,
    write_flo,
)
from .metrics import ImageSequence, MetricReport, UndefinedMetricError, edit_score, psnr, ssim, warping_error, write_report
from .pipeline import PipelineConfig, edit_video, invert_video, reconstruct_experiment
from .trajectory import TrajectorySet, render_trajectories, sample_trajectories, validate_partition

OUTPUT_DIR_ENV = "FLOWGUIDE_OUTPUT_DIR"


class CommandError(Exception):
    pass


def _out(path: str | None, default: str) -> Path:
    p = Path(path if path is not None else default)
    if not p.is_absolute() and p.parent == Path("."):
        p = Path(os.environ.get(OUTPUT_DIR_ENV, ".")) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _persist(args: argparse.Namespace, target: Path) -> None:
    """Write the resolved run configuration beside ``target``."""
    record = {k: v for k, v in vars(args).items() if k != "func"}
    record = json.loads(json.dumps(record, default=str))
    record["version"] = __version__
    run_path = target / "run.json" if target.is_dir() else target.with_name(target.name + ".run.json")
    with open(run_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


# --------------------------------------------------------------------------
# flow


def cmd_flow_gen(args) -> int:
    center = None if args.cx is None or args.cy is None else (args.cx, args.cy)
    field = synth_flow(args.kind, args.w, args.h, dx=args.dx, dy=args.dy,
                       angle=args.angle, scale=args.scale, center=center)
    out = _out(args.output, f"{args.kind}.flo")
    write_flo(field, out)
    _persist(args, out)
    print(out)
    return 0


def cmd_flow_convert(args) -> int:
    src = Path(args.input)
    out = _out(args.output, src.with_suffix(".npy" if src.suffix == ".flo" else ".flo").name)
    if src.suffix == ".flo":
        np.save(out, load_flo(src).to_array())
    else:
        write_flo(FlowField.from_array(np.load(src)), out)
    _persist(args, out)
    print(out)
    return 0


def cmd_flow_downsample(args) -> int:
    out = _out(args.output, Path(args.input).stem + f"_x{args.factor}.flo")
    write_flo(downsample_flow(load_flo(args.input), args.factor), out)
    _persist(args, out)
    print(out)
    return 0


def cmd_flow_noise(args) -> int:
    if len(args.inputs) > 1 and args.output:
        raise CommandError("use --out-dir with several inputs")
    outs = []
    for i, src in enumerate(args.inputs):
        name = Path(src).name
        if args.output:
            out = _out(args.output, name)
        else:
            out = _out(str(Path(args.out_dir) / name) if args.out_dir else None, "noisy_" + name)
        field = load_flo(src)
        # each input gets its own stream so outputs do not depend on input order
        write_flo(perturb_flow(field, args.sigma, seed=args.seed + i), out)
        outs.append(out)
    target = Path(args.out_dir) if args.out_dir else outs[0]
    _persist(args, target)
    for out in outs:
        print(out)
    return 0


# --------------------------------------------------------------------------
# trajectories


def _load_flows(paths, factor: int | None) -> FlowSequence:
    fields = [load_flo(p) for p in paths]
    if factor and factor > 1:
        fields = [downsample_flow(f, factor) for f in fields]
    return FlowSequence(fields)


def cmd_traj_sample(args) -> int:
    flows = _load_flows(args.flows, args.downsample)
    h, w = flows.shape
    tset = sample_trajectories(flows, h, w, seed=args.seed)
    out = _out(args.output, "trajectories.json")
    tset.save(out)
    _persist(args, out)
    print(f"{len(tset)} trajectories over {tset.frame_count}x{h}x{w} -> {out}")
    return 0


def cmd_traj_check(args) -> int:
    try:
        tset = TrajectorySet.load(args.input)
    except (KeyError, TypeError, ValueError) as exc:
        raise CommandError(f"malformed trajectory file: {exc}") from exc
    report = validate_partition(tset)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0 if report.ok else 1


def cmd_traj_viz(args) -> int:
    tset = TrajectorySet.load(args.input)
    frames = ImageSequence.load_pngs(args.frames).frames if args.frames else None
    images = render_trajectories(tset, args.samples, frames=frames, seed=args.seed, cell=args.cell)
    out_dir = _out(args.out_dir, "viz")
    out_dir.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    for k, img in enumerate(images):
        Image.fromarray(img).save(out_dir / f"frame_{k:03d}.png")
    _persist(args, out_dir)
    print(f"{len(images)} frames -> {out_dir}")
    return 0


# --------------------------------------------------------------------------
# pipeline


def _pipeline_inputs(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    z = FeatureVideo.load(args.latent)
    tset = TrajectorySet.load(args.traj)
    return cfg, z, tset, cfg.make_schedule(), cfg.make_unet(z.channels)


def cmd_pipeline_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    shape = (args.frames, args.height, args.width, args.channels)
    if args.static:
        data = np.repeat(rng.normal(size=(1,) + shape[1:]), args.frames, axis=0)
    else:
        data = rng.normal(size=shape)
    out = _out(args.output, "latent.f32")
    FeatureVideo(data.astype(np.float32)).save(out)
    _persist(args, out)
    print(out)
    return 0


def cmd_pipeline_invert(args) -> int:
    cfg, z0, tset, schedule, unet = _pipeline_inputs(args)
    z_T, cache = invert_video(z0, unet, tset, schedule, cfg.inv_steps)
    out_dir = _out(args.out_dir, "inversion")
    out_dir.mkdir(parents=True, exist_ok=True)
    z_T.save(out_dir / "z_T.f64", dtype="<f8")
    cache.save(out_dir / "cache")
    _persist(args, out_dir)
    print(f"z_T and {len(cache)} cached features -> {out_dir}")
    return 0


def cmd_pipeline_edit(args) -> int:
    cfg, z_T, tset, schedule, unet = _pipeline_inputs(args)
    cache = None
    if cfg.inject and not args.no_inject:
        if not args.cache:
            raise ConfigurationError("injection enabled but no --cache given")
        cache = InjectionCache.load(args.cache)
    out = _out(args.output, "edited.f32")
    edit_video(z_T, unet, tset, schedule, cfg.samp_steps, cache).save(out)
    _persist(args, out)
    print(out)
    return 0


def cmd_pipeline_reconstruct(args) -> int:
    cfg, z0, tset, schedule, unet = _pipeline_inputs(args)
    reports = reconstruct_experiment(z0, unet, tset, schedule, cfg.inv_steps, cfg.samp_steps)
    keep = {"on": ["flatten"], "off": ["no_flatten"], "both": ["flatten", "no_flatten"]}[args.flatten]
    doc = {k: reports[k].to_dict() for k in keep}
    out = _out(args.output, "reconstruction.json")
    _write_json(out, doc)
    _persist(args, out)
    print(json.dumps(doc, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# metrics


def cmd_metrics_compute(args) -> int:
    video = ImageSequence.load_pngs(args.frames)
    flows = [load_flo(p) for p in args.flows]
    report = MetricReport(e_warp_scaled=warping_error(video, flows))
    if args.reference:
        ref = ImageSequence.load_pngs(args.reference)
        if ref.frames.shape != video.frames.shape:
            raise ValueError(f"reference {ref.frames.shape} vs frames {video.frames.shape}")
        report.psnr_db = psnr(ref.frames, video.frames)
        report.ssim = float(np.mean([ssim(r, v) for r, v in zip(ref.frames, video.frames)]))
    if args.clip_t is not None:
        report.clip_t_scaled = args.clip_t
        report.s_edit = edit_score(args.clip_t, report.e_warp_scaled)
    out = _out(args.output, "metrics.json")
    write_report(report, out)
    _persist(args, out)
    print(report.to_json())
    return 0


def cmd_metrics_score(args) -> int:
    report = MetricReport(e_warp_scaled=args.e_warp, clip_t_scaled=args.clip_t,
                          s_edit=edit_score(args.clip_t, args.e_warp))
    if args.output:
        out = _out(args.output, "score.json")
        write_report(report, out)
        _persist(args, out)
    print(report.to_json())
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowguide", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    top = parser.add_subparsers(dest="command", required=True)

    # flow
    flow = top.add_parser("flow", help="generate and transform .flo fields").add_subparsers(
        dest="action", required=True)
    p = flow.add_parser("gen", help="synthesize an analytic flow field")
    p.add_argument("--kind", choices=["constant", "rotation", "zoom"], required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--dx", type=float, default=0.0)
    p.add_argument("--dy", type=float, default=0.0)
    p.add_argument("--angle", type=float, default=0.0, help="radians")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--cx", type=float)
    p.add_argument("--cy", type=float)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_flow_gen)

    p = flow.add_parser("convert", help="convert between .flo and (H, W, 2) .npy")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_flow_convert)

    p = flow.add_parser("downsample", help="block-mean downsample to a coarser grid")
    p.add_argument("input")
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_flow_downsample)

    p = flow.add_parser("noise", help="add Gaussian noise to flow fields")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    g = p.add_mutually_exclusive_group()
    g.add_argument("-o", "--output")
    g.add_argument("--out-dir")
    p.set_defaults(func=cmd_flow_noise)

    # trajectories
    traj = top.add_parser("traj", help="patch trajectories").add_subparsers(
        dest="action", required=True)
    p = traj.add_parser("sample", help="sample trajectories from a flow sequence")
    p.add_argument("flows", nargs="+", help=".flo files for frame pairs 0->1, 1->2, ...")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--downsample", type=int, help="downsample flows by this factor first")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_traj_sample)

    p = traj.add_parser("check", help="validate that trajectories partition the grid")
    p.add_argument("input")
    p.set_defaults(func=cmd_traj_check)

    p = traj.add_parser("viz", help="draw sampled trajectories on frames")
    p.add_argument("input")
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", nargs="+", help="background PNG frames")
    p.add_argument("--cell", type=int, default=8, help="pixels per patch without --frames")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_traj_viz)

    # pipeline
    pipe = top.add_parser("pipeline", help="toy inversion / editing pipeline").add_subparsers(
        dest="action", required=True)
    p = pipe.add_parser("synth-latent", help="write a random latent video fixture")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--static", action="store_true", help="repeat one frame K times")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_pipeline_synth)

    for name, func, helptext in (
        ("invert", cmd_pipeline_invert, "DDIM-invert a latent and cache block features"),
        ("edit", cmd_pipeline_edit, "DDIM-sample from z_T with feature injection"),
        ("reconstruct", cmd_pipeline_reconstruct, "invert + reconstruct, with/without FLATTEN"),
    ):
        p = pipe.add_parser(name, help=helptext)
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--latent", required=True)
        p.add_argument("--traj", required=True)
        if name == "invert":
            p.add_argument("--out-dir")
        else:
            p.add_argument("-o", "--output")
        if name == "edit":
            p.add_argument("--cache", help="cache directory written by 'pipeline invert'")
            p.add_argument("--no-inject", action="store_true")
        if name == "reconstruct":
            p.add_argument("--flatten", choices=["on", "off", "both"], default="both")
        p.set_defaults(func=func)

    # metrics
    met = top.add_parser("metrics", help="consistency and quality metrics").add_subparsers(
        dest="action", required=True)
    p = met.add_parser("compute", help="E_warp (and PSNR/SSIM, S_edit) for PNG frames")
    p.add_argument("--frames", nargs="+", required=True)
    p.add_argument("--flows", nargs="+", required=True)
    p.add_argument("--reference", nargs="+")
    p.add_argument("--clip-t", type=float, help="externally computed CLIP-T (x100)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_metrics_compute)

    p = met.add_parser("score", help="editing score from reported CLIP-T and E_warp")
    p.add_argument("--clip-t", type=float, required=True)
    p.add_argument("--e-warp", type=float, required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_metrics_score)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ConfigurationError, FlowFormatError, FlowValidationError,
            UndefinedMetricError, ZeroDivisionError, ValueError, OSError, IndexError) as exc:
        print(f"flowguide: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
