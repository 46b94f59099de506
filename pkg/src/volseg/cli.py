"""Command-line interface: ``volseg <command> ...`` (or ``python -m volseg``)."""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError, atomic_write
from .config import CaseEntry, ConfigError, RunConfig, load_run_config
from .crf import CrfConfig, CrfError, mean_field_inference, unary_from_posteriors
from .inference import (
    SoftSegmentation,
    argmax_labels,
    dump_feature_maps,
    ensemble_average,
    segment_volume,
)
from .metrics import MetricReport, binary_metrics
from .network import GeometryError, geometry_report, preset, scale_width
from .nifti import NiftiError, read_nifti, write_nifti
from .preprocess import normalize_intensity
from .synthetic import SynthConfig, generate_synthetic_dataset
from .tensor import Volume
from .training import Case, TrainingDiverged, class_capture_stats, foreground, prepare_cases, train

log = logging.getLogger("volseg")

EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_GEOMETRY = 5
EXIT_DIVERGED = 6


class CliError(Exception):
    def __init__(self, msg, code=1):
        super().__init__(msg)
        self.code = code


def _triple_arg(s: str):
    vals = [int(v) for v in s.split(",")]
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected N or X,Y,Z")
    return tuple(vals)


# ---------------------------------------------------------------------------
# case loading

def case_files(path: str) -> CaseEntry:
    """A case directory holds ``channel_*.nii[.gz]`` and optionally ``label`` and ``mask`` volumes."""
    if not os.path.isdir(path):
        raise CliError(f"{path}: not a case directory", EXIT_INPUT)
    chans = sorted(glob.glob(os.path.join(path, "channel_*.nii*")))
    if not chans:
        raise CliError(f"{path}: no channel_*.nii files found", EXIT_INPUT)

    def opt(stem):
        found = sorted(glob.glob(os.path.join(path, stem + ".nii*")))
        return found[0] if found else None

    return CaseEntry(os.path.basename(os.path.normpath(path)), chans, opt("label"), opt("mask"))


def load_image(channels, mask_path=None):
    """Stack channel files and normalize under the mask (whole volume without one)."""
    vols = [read_nifti(p) for p in channels]
    data = np.concatenate([v.data for v in vols]).astype(np.float32)
    mask = read_nifti(mask_path).data[0] > 0 if mask_path else np.ones(data.shape[1:], bool)
    return normalize_intensity(Volume(data, vols[0].spacing), mask), mask


def load_case(entry: CaseEntry, resolve=lambda p: p) -> Case:
    img, mask = load_image([resolve(p) for p in entry.channels], resolve(entry.mask) if entry.mask else None)
    if entry.label is None:
        raise CliError(f"case {entry.name!r} has no label map", EXIT_INPUT)
    labels = read_nifti(resolve(entry.label)).data[0].astype(np.int64)
    return Case(img.data, labels, mask, entry.name, img.spacing)


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_geometry(args):
    spec = preset(args.preset, args.channels, args.classes)
    if args.width != 1.0:
        spec = scale_width(spec, args.width)
    rep = geometry_report(spec, args.out_dims)
    print("\n".join(rep.lines()))


def cmd_train(args):
    cfg = load_run_config(args.config, require_seed=True)
    out = _out_dir(args.out or cfg.resolve(cfg.output_dir))
    spec = cfg.network_spec()
    cases = [load_case(e, cfg.resolve) for e in cfg.data["train"]]
    val = [load_case(e, cfg.resolve) for e in cfg.data["val"]]
    if not cases:
        raise CliError("config lists no training cases", EXIT_CONFIG)
    atomic_write(os.path.join(out, "run.json"), cfg.dumps().encode())
    try:
        res = train(spec, cases, cfg.training, val, out, os.path.join(out, "train.log"))
    except TrainingDiverged as e:
        checkpoint.save(e.params, os.path.join(out, "last_good.vmd"))
        raise CliError(f"{e}; last good parameters saved to {out}/last_good.vmd", EXIT_DIVERGED)
    checkpoint.save(res.params, os.path.join(out, "final.vmd"), {"lr": res.lr})
    evals = [r for r in res.log if r["kind"] == "eval"]
    if evals:
        print(f"final validation DSC {evals[-1]['dsc']:.4f}")
    print(f"checkpoints and log written to {out}")


def _load_checkpoint(path):
    try:
        params, _ = checkpoint.load(path)
    except FileNotFoundError:
        raise CliError(f"{path}: checkpoint not found", EXIT_INPUT) from None
    return params


def cmd_segment(args):
    params = _load_checkpoint(args.checkpoint)
    entry = case_files(args.input)
    img, mask = load_image(entry.channels, entry.mask)
    if img.channels != params.spec.input_channels:
        raise CliError(f"case has {img.channels} channels but the checkpoint expects "
                       f"{params.spec.input_channels}", EXIT_INPUT)
    soft = segment_volume(params, img, args.tile)
    out = _out_dir(args.out)
    write_nifti(Volume(soft.probs, img.spacing), os.path.join(out, "soft.nii.gz"))
    write_nifti(Volume(argmax_labels(soft), img.spacing), os.path.join(out, "labels.nii.gz"))
    print(f"wrote {out}/soft.nii.gz and {out}/labels.nii.gz (tile {'x'.join(map(str, soft.provenance['tile']))})")


def cmd_crf(args):
    if args.config:
        cfg = load_run_config(args.config, check_files=False).crf
    else:
        cfg = CrfConfig()
    soft = read_nifti(args.soft)
    entry = case_files(args.image)
    img, mask = load_image(entry.channels, entry.mask)
    if len(cfg.sigma_gamma) != img.channels:
        cfg = CrfConfig(**{**cfg.to_dict(), "sigma_gamma": list(np.resize(cfg.sigma_gamma, img.channels))})
    if args.backend:
        cfg.backend = args.backend
    state = mean_field_inference(unary_from_posteriors(soft.data), img.data, cfg,
                                 mask if entry.mask else None)
    out = _out_dir(args.out)
    write_nifti(Volume(state.q.astype(np.float32), soft.spacing), os.path.join(out, "crf_soft.nii.gz"))
    write_nifti(Volume(state.labels, soft.spacing), os.path.join(out, "crf_labels.nii.gz"))
    print(f"{state.iterations} mean-field iterations; wrote {out}/crf_soft.nii.gz and {out}/crf_labels.nii.gz")


def cmd_ensemble(args):
    members = []
    for p in args.soft:
        v = read_nifti(p)
        members.append(SoftSegmentation(v.data.astype(np.float32), v.spacing, {"path": p}))
    try:
        soft = ensemble_average(members)
    except ValueError as e:
        raise CliError(str(e), EXIT_INPUT) from None
    write_nifti(Volume(soft.probs, soft.spacing), args.out)
    if args.labels:
        write_nifti(Volume(argmax_labels(soft), soft.spacing), args.labels)
    print(f"averaged {len(members)} maps into {args.out}")


def cmd_eval(args):
    if len(args.pred) != len(args.ref):
        raise CliError("--pred and --ref need the same number of files", EXIT_INPUT)
    report = MetricReport()
    for p, r in zip(args.pred, args.ref):
        pv, rv = read_nifti(p), read_nifti(r)
        if pv.dims != rv.dims:
            raise CliError(f"{p} and {r} have different dims {pv.dims} vs {rv.dims}", EXIT_INPUT)
        classes = args.classes
        pm = foreground(pv.data[0], classes)
        rm = foreground(rv.data[0], classes)
        report.add(os.path.basename(p), binary_metrics(pm, rm, rv.spacing, args.percentile))
    print("\n".join(report.lines()))
    if args.json:
        atomic_write(args.json, json.dumps(report.to_dict(), indent=2).encode())


def cmd_sample_stats(args):
    cfg = load_run_config(args.config)
    spec = cfg.network_spec()
    cases = [load_case(e, cfg.resolve) for e in cfg.data["train"]]
    if not cases:
        raise CliError("config lists no training cases", EXIT_CONFIG)
    rep = class_capture_stats(prepare_cases(cases, spec, cfg.training.sampler), spec, cfg.training.sampler)
    print("\n".join(rep.lines()))


def cmd_dump_fms(args):
    params = _load_checkpoint(args.checkpoint)
    entry = case_files(args.input)
    img, _ = load_image(entry.channels, entry.mask)
    layers = [s.strip() for s in args.layers.split(",") if s.strip()]
    try:
        maps = dump_feature_maps(params, img, layers)
    except ValueError as e:
        raise CliError(str(e), EXIT_INPUT) from None
    out = _out_dir(args.out)
    n = 0
    for name, vols in maps.items():
        for v in vols:
            write_nifti(v, os.path.join(out, f"{name}_fm{v.meta['fm']:03d}.nii.gz"))
            n += 1
    print(f"wrote {n} feature maps to {out}")


def cmd_synth(args):
    cfg = SynthConfig(dims=args.dims, channels=args.channels, lesion_fraction=args.fraction, nested=args.nested)
    cases = generate_synthetic_dataset(cfg, args.seed, args.cases)
    out = _out_dir(args.out)
    entries = []
    for c in cases:
        d = _out_dir(os.path.join(out, c.name))
        chans = []
        for i, ch in enumerate(c.image):
            p = os.path.join(d, f"channel_{i}.nii.gz")
            write_nifti(Volume(ch), p)
            chans.append(os.path.relpath(p, out))
        write_nifti(Volume(c.labels), os.path.join(d, "label.nii.gz"))
        write_nifti(Volume(c.mask.astype(np.uint8)), os.path.join(d, "mask.nii.gz"))
        entries.append(CaseEntry(c.name, chans, os.path.join(c.name, "label.nii.gz"),
                                 os.path.join(c.name, "mask.nii.gz")))
    n_val = max(1, len(entries) // 5) if len(entries) > 1 else 0
    run = RunConfig(seed=args.seed, output_dir="run",
                    network={"preset": "deepmedic", "width": 0.5, "input_channels": args.channels,
                             "class_count": 3 if args.nested else 2},
                    data={"train": entries[n_val:], "val": entries[:n_val]})
    run.crf = CrfConfig(sigma_gamma=[1.0] * args.channels)
    atomic_write(os.path.join(out, "run.json"), run.dumps().encode())
    print(f"wrote {len(cases)} cases and a run config to {out}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volseg", description="Dense 3D CNN segmentation with CRF refinement.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("geometry", help="receptive fields, FM dims, input sizes and parameter counts")
    s.add_argument("--preset", default="deepmedic")
    s.add_argument("--out-dims", type=_triple_arg, default=(9, 9, 9))
    s.add_argument("--width", type=float, default=1.0)
    s.add_argument("--channels", type=int, default=1)
    s.add_argument("--classes", type=int, default=2)
    s.set_defaults(func=cmd_geometry)

    s = sub.add_parser("train", help="train a network from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="segment a case directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--tile", type=_triple_arg, default=(36, 36, 36))
    s.add_argument("--out", default="segmentation")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("crf", help="refine soft maps with the fully connected CRF")
    s.add_argument("--config")
    s.add_argument("--soft", required=True)
    s.add_argument("--image", required=True, help="case directory with the channel volumes")
    s.add_argument("--backend", choices=("exact", "lattice"))
    s.add_argument("--out", default="crf")
    s.set_defaults(func=cmd_crf)

    s = sub.add_parser("ensemble", help="average soft maps")
    s.add_argument("--soft", nargs="+", required=True)
    s.add_argument("--out", default="ensemble.nii.gz")
    s.add_argument("--labels")
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("eval", help="DSC, precision, sensitivity, specificity, ASSD, Hausdorff")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--ref", nargs="+", required=True)
    s.add_argument("--classes", type=lambda v: tuple(int(x) for x in v.split(",")))
    s.add_argument("--percentile", type=float)
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample-stats", help="real vs captured class distribution of the sampler")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_sample_stats)

    s = sub.add_parser("dump-fms", help="write feature maps of selected layers")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--layers", required=True, help="comma-separated 1-based indices or layer names")
    s.add_argument("--out", default="fms")
    s.set_defaults(func=cmd_dump_fms)

    s = sub.add_parser("synth", help="generate a synthetic dataset and a run config")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, default=20)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--dims", type=_triple_arg, default=(64, 64, 64))
    s.add_argument("--channels", type=int, default=2)
    s.add_argument("--fraction", type=float, default=0.02)
    s.add_argument("--nested", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (NiftiError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except GeometryError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_GEOMETRY
    except (CrfError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
