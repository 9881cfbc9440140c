"""Command-line entry points: distort, train, infer, eval, plot, params, time, schema.

Every command exits with status 0 on success and 1 on any error (2 for
usage errors). Output directories are assembled in a temporary sibling and
renamed into place, so a failed command leaves nothing half-written.

``CGRP_HOME`` is the default root for training runs (``$CGRP_HOME/runs``)
and a fallback location for relative checkpoint paths.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .checkpoint import atomic_write, load_checkpoint
from .config import build_train_config, load_config, schema
from .datasets import (
    DistortionRanges,
    distort_corpus,
    load_records,
    read_manifest,
    save_record,
    scan_pairs,
    split_corpus,
    synthetic_corpus,
    write_manifest,
)
from .geometry import DeformationField, save_field
from .images import read_image, recolor, to_tensor, write_image, write_raw
from .losses import VGGFeatures
from .metrics import (
    build_document,
    evaluate_fusion,
    evaluate_registration,
    format_table,
    identity_aligner,
    read_document,
    write_document,
)
from .pipeline import CGRPModel, count_params
from .reporting import plot_document, plot_losses
from .trainer import time_inference, train_stage

logger = logging.getLogger("cgrp")
HOME_ENV = "CGRP_HOME"


class CliError(Exception):
    pass


# -- helpers ---------------------------------------------------------------

def _home() -> Path | None:
    value = os.environ.get(HOME_ENV)
    return Path(value) if value else None


def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    if p.is_file():
        return p
    home = _home()
    if home is not None and not p.is_absolute() and (home / p).is_file():
        return home / p
    raise CliError(f"checkpoint not found: {path}")


@contextmanager
def _staged_dir(target, force: bool):
    """Yield a temporary directory that replaces ``target`` on success."""
    target = Path(target)
    if target.exists() and not force:
        raise CliError(f"{target} already exists (use --force to replace it)")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}."))
    try:
        yield tmp
        if target.exists():
            shutil.rmtree(target) if target.is_dir() else target.unlink()
        os.replace(tmp, target)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def _required_stages(disable_cpstn: bool, disable_mrrn: bool) -> list[str]:
    needed = ["difn"]
    if not disable_mrrn:
        needed.insert(0, "mrrn")
        if not disable_cpstn:
            needed.insert(0, "cpstn")
    return needed


def _load_model(path, disable_cpstn=False, disable_mrrn=False) -> CGRPModel:
    model = CGRPModel.from_checkpoint(load_checkpoint(_resolve_checkpoint(path)))
    if "joint" not in model.stages:
        missing = [s for s in _required_stages(disable_cpstn, disable_mrrn) if s not in model.stages]
        if missing:
            raise CliError(
                f"checkpoint {path} has stages {model.stages or '[]'} but this run needs {', '.join(missing)}"
            )
    return model


def _padded_infer(model: CGRPModel, vis: np.ndarray, ir: np.ndarray, **flags) -> dict:
    """Full pipeline on one pair, replicate-padding to the pyramid stride."""
    h, w = vis.shape
    f = model.mrrn.factor
    ph, pw = (-h) % f, (-w) % f
    pad = lambda a: F.pad(to_tensor(a), (0, pw, 0, ph), mode="replicate")
    out = model.infer(pad(vis), pad(ir), **flags)
    return {k: v[..., :h, :w] for k, v in out.items()}


@torch.no_grad()
def _level_fields(model: CGRPModel, vis: np.ndarray, ir: np.ndarray, disable_cpstn: bool) -> list:
    """Refined field of every pyramid level (finest first), at that level's resolution."""
    h, w = vis.shape
    f = model.mrrn.factor
    pad = lambda a: F.pad(to_tensor(a), (0, (-w) % f, 0, (-h) % f), mode="replicate")
    model.eval()
    target = pad(vis) if disable_cpstn else model.cpstn.translate(pad(vis), "vis->ir")
    _, levels = model.mrrn(target, pad(ir))
    return [field[..., : -(-h // 2**k), : -(-w // 2**k)] for k, field in enumerate(levels.refined)]


def _model_aligner(model, disable_cpstn):
    def align(vis, ir):
        out = _padded_infer(model, vis, ir, disable_cpstn=disable_cpstn)
        return out["ir_reg"][0, 0].numpy()
    return align


def _model_fuser(model, **flags):
    def fuse(vis, ir):
        return _padded_infer(model, vis, ir, **flags)["fused"][0, 0].numpy()
    return fuse


def _manifest_records(manifest_path, split: str, records_dir=None):
    manifest = read_manifest(manifest_path)
    root = Path(records_dir) if records_dir else Path(manifest_path).parent / "records"
    ids = {"train": manifest.train, "test": manifest.test,
           "all": list(dict.fromkeys(manifest.train + manifest.test))}[split]
    if not ids:
        raise CliError(f"manifest {manifest_path} has no '{split}' items")
    try:
        records = load_records(root, ids)
    except FileNotFoundError as exc:
        raise CliError(f"manifest/corpus mismatch: {exc}") from exc
    corpus = manifest.meta.get("corpus")
    if corpus is not None:
        bad = [r.item_id for r in records if r.corpus != corpus]
        if bad:
            raise CliError(f"manifest/corpus mismatch: records {bad[:5]} are not from corpus '{corpus}'")
    return manifest, records


def _ablation_name(disable_cpstn=False, disable_mrrn=False, disable_ifm=False) -> str:
    off = [n for n, flag in (("CPSTN", disable_cpstn), ("MRRN", disable_mrrn), ("IFM", disable_ifm)) if flag]
    return "CGRP" if not off else "CGRP w/o " + "+".join(off)


# -- commands --------------------------------------------------------------

def cmd_distort(args) -> int:
    ranges = DistortionRanges(args.max_rotation, args.max_translation, args.scale_jitter,
                              args.max_shear, args.elastic_sigma, args.max_elastic_alpha)
    if args.synthetic:
        items = [(i, v, r, None) for i, v, r in synthetic_corpus(args.synthetic, args.size, args.seed)]
        corpus = args.corpus or "synthetic"
    else:
        try:
            items = scan_pairs(args.input, args.vis_dir, args.ir_dir, keep_chroma=True)
        except (FileNotFoundError, OSError, ValueError) as exc:
            raise CliError(f"cannot read corpus: {exc}") from exc
        corpus = args.corpus or Path(args.input).name
    if not items:
        raise CliError("empty corpus: no visible/infrared pairs found")
    records = distort_corpus([(i, v, r) for i, v, r, _ in items], ranges, args.seed, corpus)
    manifest = split_corpus([r.item_id for r in records], args.test_fraction, args.seed, args.overlap)
    manifest.meta.update(corpus=corpus, seed=args.seed, overlap=str(args.overlap).lower(),
                         test_fraction=args.test_fraction)
    params = {"seed": args.seed, "corpus": corpus, **ranges.__dict__}
    with _staged_dir(args.out, args.force) as tmp:
        for record, (_, _, _, rgb) in zip(records, items):
            save_record(record, tmp / "records" / record.item_id)
            if rgb is not None:
                write_raw(tmp / "records" / record.item_id / "vis_rgb.npy", rgb)
        write_manifest(manifest, tmp / "manifest.txt")
        (tmp / "distortion.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(records)} records ({len(manifest.train)} train / {len(manifest.test)} test) to {args.out}")
    return 0


def _train_overrides(args) -> dict:
    loss = {}
    if args.disable_lpst:
        loss.update(perceptual=0.0, style=0.0)
    if args.disable_lcross:
        loss.update(content=0.0, edge=0.0)
    return dict(
        stage=args.stage, batch_size=args.batch_size, patch=args.patch, epochs=args.epochs,
        max_steps=args.max_steps, lr=args.lr, seed=args.seed, checkpoint_every=args.checkpoint_every,
        pseudo_source="visible" if args.disable_cpstn else args.pseudo_source,
        use_ifm=False if args.disable_ifm else None, backbone_weights=args.backbone_weights, loss=loss,
    )


def cmd_train(args) -> int:
    raw = load_config(args.config) if args.config else {}
    config = build_train_config(raw, **_train_overrides(args))
    out = Path(args.out) if args.out else (_home() / "runs" if _home() else None)
    if out is None:
        raise CliError(f"no output directory: pass --out or set {HOME_ENV}")
    _, records = _manifest_records(args.manifest, "train", args.records)
    model = CGRPModel.from_checkpoint(load_checkpoint(_resolve_checkpoint(args.init))) if args.init else None
    backbone = None
    if config.stage != "difn":
        backbone = VGGFeatures(config.loss.layer_ids, weights=config.backbone_weights, seed=config.seed)
    model, ledger, path = train_stage(config, records, model, backbone=backbone, out_dir=out)
    last = ledger.records[-1]
    print(f"stage {config.stage}: {len(ledger.records)} steps, final L_total={last['L_total']:.6g}")
    print(f"checkpoint: {path}")
    return 0


def cmd_infer(args) -> int:
    flags = dict(disable_cpstn=args.disable_cpstn, disable_mrrn=args.disable_mrrn, disable_ifm=args.disable_ifm)
    model = _load_model(args.checkpoint, args.disable_cpstn, args.disable_mrrn)
    try:
        vis, rgb = read_image(args.vis, keep_chroma=True)
        ir = read_image(args.ir)
    except OSError as exc:
        raise CliError(f"cannot read input pair: {exc}") from exc
    if vis.shape != ir.shape:
        raise CliError(f"visible {vis.shape} and infrared {ir.shape} sizes differ")
    out = _padded_infer(model, vis, ir, **flags)
    with _staged_dir(args.out, args.force) as tmp:
        for key in ("pseudo_ir", "ir_reg", "fused"):
            write_image(tmp / f"{key}.png", out[key][0, 0].numpy(), bits=args.bits)
        save_field(DeformationField.from_tensor(out["field"]), tmp / "field.dfld")
        if args.raw:
            write_raw(tmp / "fused.npy", out["fused"][0, 0].numpy())
        if args.level_fields and not args.disable_mrrn:
            for k, level in enumerate(_level_fields(model, vis, ir, args.disable_cpstn)):
                save_field(DeformationField.from_tensor(level), tmp / f"field_level{k}.dfld")
        if args.chroma:
            if rgb is None:
                logger.warning("visible input is gray; no chroma to reinject")
            else:
                color = recolor(out["fused"][0, 0].numpy(), rgb)
                from PIL import Image

                Image.fromarray(np.round(color * 255).astype(np.uint8), "RGB").save(tmp / "fused_color.png")
    print(f"wrote pseudo_ir, ir_reg, fused and field to {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest, records = _manifest_records(args.manifest, args.split, args.records)
    ckpt = _resolve_checkpoint(args.checkpoint)
    meta = {"checkpoint": str(ckpt), "manifest": str(args.manifest), "split": args.split,
            "corpus": manifest.meta.get("corpus", "unknown")}
    rows = {}
    if args.mode == "registration":
        model = _registration_model(ckpt, args.disable_cpstn)
        rows["Misaligned Input"] = evaluate_registration(records, identity_aligner, meta)
        rows[_ablation_name(args.disable_cpstn)] = evaluate_registration(
            records, _model_aligner(model, args.disable_cpstn), meta)
    else:
        configs = [dict(disable_cpstn=args.disable_cpstn, disable_mrrn=args.disable_mrrn,
                        disable_ifm=args.disable_ifm)]
        if args.ablation_table:
            configs = [dict(disable_cpstn=True, disable_mrrn=True), dict(disable_cpstn=True),
                       dict(), dict(disable_ifm=True)]
        for flags in configs:
            model = _load_model(ckpt, flags.get("disable_cpstn", False), flags.get("disable_mrrn", False))
            rows[_ablation_name(**flags)] = evaluate_fusion(
                records, _model_fuser(model, **flags), args.ir_reference, meta)
    doc = build_document(rows, args.mode, meta)
    with _staged_dir(args.out, args.force) as tmp:
        write_document(doc, tmp / "report.json")
        atomic_write(tmp / "report.txt", format_table(doc).encode("utf-8"))
        plot_document(doc, tmp)
    print(format_table(doc), end="")
    return 0


def _registration_model(ckpt, disable_cpstn) -> CGRPModel:
    model = CGRPModel.from_checkpoint(load_checkpoint(ckpt))
    needed = ["mrrn"] if disable_cpstn else ["cpstn", "mrrn"]
    missing = [s for s in needed if s not in model.stages and "joint" not in model.stages]
    if missing:
        raise CliError(f"checkpoint {ckpt} lacks stage(s) {', '.join(missing)} needed for registration")
    return model


def cmd_plot(args) -> int:
    if args.ledger:
        path = plot_losses(args.source, args.out)
        print(f"wrote {path}")
        return 0
    doc = read_document(args.source)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in plot_document(doc, out):
        print(f"wrote {path}")
    atomic_write(out / "report.txt", format_table(doc).encode("utf-8"))
    return 0


def cmd_params(args) -> int:
    counts = count_params(_resolve_checkpoint(args.checkpoint)) if args.checkpoint \
        else count_params(CGRPModel.create(0))
    width = max(map(len, counts))
    for name, value in counts.items():
        print(f"{name.ljust(width)}  {value:>10,d}  ({value / 1e6:.3f}M)")
    return 0


def cmd_time(args) -> int:
    model = CGRPModel.from_checkpoint(_resolve_checkpoint(args.checkpoint)) if args.checkpoint \
        else CGRPModel.create(0)
    if args.threads:
        torch.set_num_threads(args.threads)
    mean, std = time_inference(model, args.size, args.runs, args.warmup)
    print(f"{args.size}x{args.size} pair: {mean * 1e3:.2f} ms +- {std * 1e3:.2f} ms over {args.runs} runs")
    return 0


def cmd_schema(args) -> int:
    text = json.dumps(schema(), indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write(args.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return 0


# -- parser ----------------------------------------------------------------

def _ablation_flags(p, train=False):
    p.add_argument("--disable-cpstn", action="store_true",
                   help="register the infrared image directly against the visible image")
    if not train:
        p.add_argument("--disable-mrrn", action="store_true", help="fuse the raw misaligned pair")
    p.add_argument("--disable-ifm", action="store_true",
                   help="replace the attention module by concatenation + 3x3 reduction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgrp", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distort", help="synthesize a misaligned corpus from registered pairs")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="directory with vis/ and ir/ subdirectories of registered pairs")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N toy pairs instead")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--size", type=int, default=64, help="toy image size (with --synthetic)")
    p.add_argument("--corpus", help="corpus name (default: input directory name)")
    p.add_argument("--vis-dir", default="vis")
    p.add_argument("--ir-dir", default="ir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-rotation", type=float, default=5.0, help="degrees")
    p.add_argument("--max-translation", type=float, default=5.0, help="pixels")
    p.add_argument("--scale-jitter", type=float, default=0.0, help="relative, e.g. 0.05")
    p.add_argument("--max-shear", type=float, default=0.0, help="degrees")
    p.add_argument("--elastic-sigma", type=float, default=8.0, help="smoothing in pixels")
    p.add_argument("--max-elastic-alpha", type=float, default=6.0, help="peak elastic displacement, pixels")
    p.add_argument("--test-fraction", type=float, default=0.55)
    p.add_argument("--overlap", action="store_true",
                   help="train on every item and test on a random subset (unsupervised protocol)")
    p.add_argument("--force", action="store_true", help="replace an existing output directory")
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--records", help="record directory (default: <manifest dir>/records)")
    p.add_argument("--config", help="JSON config file (see 'cgrp schema')")
    p.add_argument("--stage", choices=("cpstn", "mrrn", "difn", "joint"))
    p.add_argument("--init", help="checkpoint holding the earlier stages")
    p.add_argument("--out", help=f"run directory (default: ${HOME_ENV}/runs)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--pseudo-source", choices=("cpstn", "visible", "aligned"))
    p.add_argument("--backbone-weights", help="'imagenet' (default), 'random' or a VGG-19 weights file")
    _ablation_flags(p, train=True)
    p.add_argument("--disable-lpst", action="store_true", help="drop the perceptual-style loss")
    p.add_argument("--disable-lcross", action="store_true", help="drop the cross-path loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="translate, register and fuse one pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vis", required=True, help="visible image (colour is reduced to luminance)")
    p.add_argument("--ir", required=True, help="infrared image")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bits", type=int, choices=(8, 16), default=8)
    p.add_argument("--chroma", action="store_true", help="also write a recoloured fused image")
    p.add_argument("--raw", action="store_true", help="also write the fused image as float32 fused.npy")
    p.add_argument("--level-fields", action="store_true",
                   help="also write the refined field of every pyramid level (field_level<k>.dfld)")
    p.add_argument("--force", action="store_true")
    _ablation_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--records", help="record directory (default: <manifest dir>/records)")
    p.add_argument("--mode", choices=("registration", "fusion"), required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--ir-reference", choices=("aligned", "distorted"), default="aligned",
                   help="infrared image the fusion metrics compare against")
    p.add_argument("--ablation-table", action="store_true",
                   help="fusion mode: evaluate every ablation configuration")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--force", action="store_true")
    _ablation_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="re-render figures from a stored report or loss log")
    p.add_argument("source", help="report.json (or a ledger.txt with --ledger)")
    p.add_argument("--out", required=True, help="output directory (or PNG path with --ledger)")
    p.add_argument("--ledger", action="store_true", help="plot training curves from a loss log")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("params", help="parameter counts per sub-network")
    p.add_argument("--checkpoint", help="checkpoint (default: freshly built default model)")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("time", help="mean inference time for one pair")
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--threads", type=int, help="torch intra-op threads")
    p.set_defaults(func=cmd_time)

    p = sub.add_parser("schema", help="print the training config schema")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a nonzero exit
        if args.verbose:
            logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
