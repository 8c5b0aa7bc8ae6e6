"""Speckle reduction for OCT B-scans by pseudo-multimodal fusion (``pmfn`` command).

Each subcommand works on a workspace directory (``manifest.json`` plus PFM
images) and prints one JSON object to stdout describing what it produced.
Progress and errors go to stderr.

Exit codes: 0 success, 2 invalid input or configuration, 3 a required
earlier stage is missing, 1 anything else.
"""

import argparse
from dataclasses import replace
import json
import logging
import os
import sys

from .errors import PMFNError, StageDependencyError, ValidationError

log = logging.getLogger("pmfn")

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_MISSING = 0, 1, 2, 3
PRESETS = ("desk", "full")


# ---------------------------------------------------------------- config

def _seed(args):
    """``--seed`` beats ``PMFN_SEED`` beats the config file."""
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PMFN_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"PMFN_SEED must be an integer, got {env!r}") from None


def _read_json(path, what):
    if not os.path.isfile(path):
        raise ValidationError(f"{what} not found: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path}: invalid JSON ({err})") from None


def load_config(args):
    from .pipeline import PipelineConfig

    base = PipelineConfig.full() if args.preset == "full" else PipelineConfig.desk()
    if args.config:
        over = _read_json(args.config, "config file")
        if not isinstance(over, dict):
            raise ValidationError(f"{args.config}: config must be a JSON object")
        merged = _merge(base.to_dict(), over, "config")
        cfg = PipelineConfig.from_dict(merged)
    else:
        cfg = base
    seed = _seed(args)
    if seed is not None:
        cfg = replace(cfg, training=replace(cfg.training, seed=seed))
    if getattr(args, "radius", None) is not None:
        cfg = replace(cfg, radius=args.radius)
    return cfg


def _merge(base, over, where):
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise ValidationError(f"unknown key {where}.{k}")
        if isinstance(v, dict) and isinstance(base[k], dict):
            out[k] = _merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def _workspace(path):
    from .workspace import Workspace

    if not os.path.exists(path):
        raise ValidationError(f"workspace not found: {path}")
    return Workspace.open(path)


def _checkpoint(ws, given, name):
    path = given or ws.checkpoint_path(name)
    if path is None:
        raise StageDependencyError(f"no {name} checkpoint recorded in {ws.manifest_path}; "
                                   f"train it or pass --{name}")
    if not os.path.isfile(path):
        raise ValidationError(f"checkpoint not found: {path}")
    return path


def _emit(obj):
    json.dump(obj, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------- commands

def cmd_phantom(args):
    from .phantom import PhantomSpec, generate_phantom, retina_spec, save_phantom

    if args.spec:
        spec = PhantomSpec.from_dict(_read_json(args.spec, "phantom spec"))
    else:
        spec = retina_spec(args.size[0], args.size[1])
    over = {}
    if args.locations is not None:
        over["n_locations"] = args.locations
    if args.repeats is not None:
        over["n_repeats"] = args.repeats
    if args.looks is not None:
        over["speckle_looks"] = args.looks
    if args.jitter is not None:
        over["inter_frame_jitter"] = args.jitter
    seed = _seed(args)
    if seed is not None:
        over["seed"] = seed
    if over:
        spec = PhantomSpec.from_dict({**spec.to_dict(), **over})
    spec.validate()
    log.info("rendering %d locations x %d repeats at %dx%d", spec.n_locations, spec.n_repeats,
             spec.height, spec.width)
    ws = save_phantom(generate_phantom(spec), args.out)
    _emit({"workspace": ws.manifest_path, "rois": os.path.join(args.out, "rois.json")})


def cmd_average(args):
    from .pipeline import run_average, run_preprocess

    cfg = load_config(args)
    ws = _workspace(args.workspace)
    ran = [s for s, did in (("pre", run_preprocess(ws, cfg, args.force)),
                            ("ln", run_average(ws, cfg, args.force, args.threads))) if did]
    _emit({"workspace": ws.manifest_path, "recomputed": ran})


def cmd_selffuse(args):
    from .pipeline import run_selffuse

    cfg = load_config(args)
    ws = _workspace(args.workspace)
    did = run_selffuse(ws, cfg, args.force, args.threads)
    _emit({"workspace": ws.manifest_path, "recomputed": ["sf"] if did else []})


def cmd_train(args):
    from .nn import load_checkpoint
    from .pipeline import run_train_baseline, run_train_net1, run_train_pmfn
    from .plotting import plot_loss_history

    cfg = load_config(args)
    ws = _workspace(args.workspace)
    runner = {"net1": run_train_net1, "pmfn": run_train_pmfn,
              "baseline": run_train_baseline}[args.network]
    ckpt, did = runner(ws, cfg, args.force)
    loss_csv = os.path.join(os.path.dirname(ckpt), f"{args.network}_loss.csv")
    png = os.path.join(os.path.dirname(ckpt), f"{args.network}_loss.png")
    if did or not os.path.isfile(png):
        import csv
        with open(loss_csv) as f:
            rows = list(csv.DictReader(f))
        steps = sum(1 for r in rows if r["epoch"] == "0")
        plot_loss_history([float(r["loss"]) for r in rows], png, steps)
    header, _ = load_checkpoint(ckpt)
    log.info("%s: %d steps", args.network, header["step"])
    _emit({"checkpoint": ckpt, "loss_history": loss_csv, "figure": png,
           "recomputed": [args.network] if did else []})


def cmd_pseudo(args):
    from .pipeline import run_pseudo

    cfg = load_config(args)
    ws = _workspace(args.workspace)
    net1 = _checkpoint(ws, args.net1, "net1")
    did = run_pseudo(ws, cfg, net1, args.force, args.threads)
    _emit({"workspace": ws.manifest_path, "recomputed": ["pseudo", "grad"] if did else []})


def cmd_denoise(args):
    from .pipeline import run_denoise, run_pseudo

    cfg = load_config(args)
    ws = _workspace(args.workspace)
    ran = []
    if args.net1:
        if run_pseudo(ws, cfg, _checkpoint(ws, args.net1, "net1"), args.force, args.threads):
            ran += ["pseudo", "grad"]
    if args.pmfn is not None:
        pmfn = _checkpoint(ws, args.pmfn, "pmfn")
    elif args.baseline_only or (args.baseline and ws.checkpoint_path("pmfn") is None):
        pmfn = None
    else:
        pmfn = _checkpoint(ws, None, "pmfn")
    base = args.baseline
    if base is None and ws.checkpoint_path("baseline") is not None:
        base = ws.checkpoint_path("baseline")
    base = _checkpoint(ws, base, "baseline") if base is not None else None
    if pmfn is None and base is None:
        raise ValidationError("nothing to do: give --pmfn and/or --baseline")
    before = dict(ws.manifest["fingerprints"])
    run_denoise(ws, cfg, pmfn, base, args.force, args.threads)
    ran += [s for s in ("out", "out_baseline")
            if ws.manifest["fingerprints"].get(s) != before.get(s) or args.force]
    _emit({"workspace": ws.manifest_path, "recomputed": ran})


def _images(arg):
    return [s for s in arg.split(",") if s] if arg else None


def cmd_eval(args):
    from .metrics import SSIMConfig
    from .report import DEFAULT_IMAGES, evaluate, load_rois, write_report

    ws = _workspace(args.workspace)
    if not os.path.isfile(args.rois):
        raise ValidationError(f"ROI file not found: {args.rois}")
    entries, profile = load_rois(args.rois)
    images = _images(args.images) or [s for s in DEFAULT_IMAGES
                                       if s == "hn" or ws.has_stage(s)]
    ssim_cfg = None if args.data_range is None else SSIMConfig(data_range=args.data_range)
    report = evaluate(ws, entries, images, args.reference, profile, ssim_cfg)
    written = write_report(report, args.out, figures=not args.no_figures)
    for img in images:
        log.info("%-14s SSIM %.4f", img, report.ssim[img])
    _emit({"report": os.path.join(args.out, "report.json"),
           "files": [os.path.join(args.out, w) for w in written], "ssim": report.ssim})


def cmd_plot_columns(args):
    from .metrics import ROI, mean_column_intensity
    from .plotting import plot_column_profiles
    from .report import read_image, write_columns_csv

    ws = _workspace(args.workspace)
    if args.roi.endswith(".json"):
        doc = _read_json(args.roi, "ROI file")
        prof = doc.get("profile", doc) if isinstance(doc, dict) else None
        if not isinstance(prof, dict):
            raise ValidationError(f"{args.roi}: no profile ROI")
    else:
        try:
            loc, top, left, h, w = (int(v) for v in args.roi.split(","))
        except ValueError:
            raise ValidationError("--roi must be a JSON file or 'location,top,left,height,width'"
                                  ) from None
        prof = dict(location=loc, top=top, left=left, height=h, width=w)
    for k in ("location", "top", "left", "height", "width"):
        if k not in prof:
            raise ValidationError(f"profile ROI lacks {k!r}")
    roi = ROI(prof["top"], prof["left"], prof["height"], prof["width"])
    images = _images(args.images) or [s for s in ("clean", "ln", "out_baseline", "out")
                                      if ws.has_stage(s)] + ["hn"]
    loc = int(prof["location"])
    columns = {img: mean_column_intensity(roi.pixels(read_image(ws, img, loc))).tolist()
               for img in images}
    write_columns_csv(args.out, columns)
    files = [args.out]
    if args.png:
        plot_column_profiles(columns, args.png)
        files.append(args.png)
    _emit({"files": files})


def cmd_run(args):
    from .pipeline import run_full
    from .report import evaluate, load_rois, write_report

    cfg = load_config(args)
    ws = _workspace(args.workspace)
    train_ws = _workspace(args.train) if args.train else None
    rois = args.rois or os.path.join(ws.root, "rois.json")
    if args.out and not os.path.isfile(rois):
        raise ValidationError(f"ROI file not found: {rois}")
    ran = run_full(cfg, ws, train_ws, args.force, args.threads)
    out = {"workspace": ws.manifest_path, "recomputed": ran}
    if args.out:
        entries, profile = load_rois(rois)
        report = evaluate(ws, entries, profile=profile)
        write_report(report, args.out, figures=not args.no_figures)
        out["report"] = os.path.join(args.out, "report.json")
        out["ssim"] = report.ssim
    _emit(out)


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of pipeline settings (partial is fine)")
    common.add_argument("--preset", choices=PRESETS, default="desk",
                        help="base settings the config file overrides (default: desk)")
    common.add_argument("--seed", type=int, help="training or phantom seed (env: PMFN_SEED)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads; use 1 for byte-reproducible output")
    common.add_argument("--force", action="store_true", help="recompute even if cached")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pmfn", description=__doc__.split("\n\n")[0].replace("``", ""))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="render a synthetic volume")
    s.add_argument("out", help="output workspace directory")
    s.add_argument("--spec", help="phantom spec JSON (default: retina preset)")
    s.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    s.add_argument("--locations", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--looks", type=float, help="speckle looks; inf disables speckle")
    s.add_argument("--jitter", type=float, help="max inter-frame shift in pixels")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("average", parents=[common], help="crop/pad frames and average repeats")
    s.add_argument("workspace")
    s.set_defaults(func=cmd_average)

    s = sub.add_parser("selffuse", parents=[common], help="self-fuse the frame averages")
    s.add_argument("workspace")
    s.add_argument("--radius", type=int, help="neighbours on each side")
    s.set_defaults(func=cmd_selffuse)

    s = sub.add_parser("train", parents=[common], help="train one network")
    s.add_argument("network", choices=("net1", "pmfn", "baseline"))
    s.add_argument("workspace")
    s.add_argument("--radius", type=int, help="neighbours on each side (net1 input width)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pseudo", parents=[common], help="predict pseudo-modality and gradient")
    s.add_argument("workspace")
    s.add_argument("--net1", help="checkpoint (default: the one recorded in the workspace)")
    s.add_argument("--radius", type=int)
    s.set_defaults(func=cmd_pseudo)

    s = sub.add_parser("denoise", parents=[common], help="apply the fusion and/or baseline net")
    s.add_argument("workspace")
    s.add_argument("--pmfn", help="fusion network checkpoint")
    s.add_argument("--net1", help="compute the pseudo-modality with this checkpoint first")
    s.add_argument("--baseline", help="single-input baseline checkpoint")
    s.add_argument("--baseline-only", action="store_true", help="skip the fusion network")
    s.add_argument("--radius", type=int)
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("eval", parents=[common], help="metrics report (JSON, CSV, figures)")
    s.add_argument("workspace")
    s.add_argument("--rois", required=True, help="ROI JSON")
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--images", help="comma-separated stages (default: hn,ln,out_baseline,out)")
    s.add_argument("--reference", help="SSIM reference stage (default: clean if present, else ln)")
    s.add_argument("--data-range", type=float, help="SSIM dynamic range (default: reference range)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot-columns", parents=[common], help="row-profile vectors as CSV")
    s.add_argument("workspace")
    s.add_argument("--roi", required=True,
                   help="ROI JSON with a 'profile' entry, or 'location,top,left,height,width'")
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--images", help="comma-separated stages")
    s.add_argument("--png", help="also draw the profiles to this file")
    s.set_defaults(func=cmd_plot_columns)

    s = sub.add_parser("run", parents=[common], help="every stage, then optionally a report")
    s.add_argument("workspace", help="test volume")
    s.add_argument("--train", help="training volume (default: the test volume)")
    s.add_argument("--rois", help="ROI JSON (default: <workspace>/rois.json)")
    s.add_argument("--out", help="write a report here")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="pmfn: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("pmfn: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except StageDependencyError as err:
        print(f"pmfn: missing dependency: {err}", file=sys.stderr)
        return EXIT_MISSING
    except ValidationError as err:
        print(f"pmfn: invalid input: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (PMFNError, OSError) as err:
        print(f"pmfn: error: {err}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
