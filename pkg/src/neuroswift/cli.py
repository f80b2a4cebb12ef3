"""neuroswift command-line interface.

Exit codes: 0 ok, 2 configuration, 3 I/O or format, 4 compatibility.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import dataio as dio
from . import evaluation as ev
from . import pipeline as pl
from . import training as tr
from .config import load_config, validate_document
from .errors import ConfigurationError, NeuroSwiftError

log = logging.getLogger("neuroswift")


def _world(cfg):
    return pl.world_from_config(cfg)


def _subject_dir(cfg, subject_id, given):
    return Path(given) if given else cfg.root / "subjects" / subject_id


def _load_data(cfg, world, subject_id, data_dir):
    cfg.subject(subject_id)
    ds, mask = dio.load_subject(_subject_dir(cfg, subject_id, data_dir), world.hash)
    if ds.subject_id != subject_id:
        raise ConfigurationError(f"dataset holds subject {ds.subject_id!r}, not {subject_id!r}")
    return ds, mask


def cmd_world(args, cfg):
    world = _world(cfg)
    out = Path(args.out) if args.out else cfg.root / "world"
    dio.save_world(world, out)
    pl.write_config_echo(out, cfg)
    print(f"world {world.hash} -> {out}")


def cmd_synth(args, cfg):
    world = _world(cfg)
    ds, mask = pl.synth_subject(world, cfg, args.subject)
    out = _subject_dir(cfg, args.subject, args.out)
    dio.save_subject(ds, mask, out, world.hash)
    pl.write_config_echo(out, cfg)
    counts = {s: len(ds.indices(s)) for s in dio.SPLITS}
    print(f"{args.subject}: {ds.n_voxels} voxels, {counts} -> {out}")


def cmd_train(args, cfg):
    world = _world(cfg)
    ds, _ = _load_data(cfg, world, args.subject, args.data)
    which = ("autokl", "clip") if args.adapter == "both" else (args.adapter,)
    ckpt = tr.pretrain(ds, world, cfg.train, which)
    out = Path(args.out) if args.out else cfg.root / "checkpoints" / args.subject
    tr.save_checkpoint(out, ckpt)
    pl.write_config_echo(out, cfg)
    for kind, hist in ckpt.history.items():
        last = hist[-1]
        print(f"{kind}: epoch {last['epoch']} train {last['train']:.6g} val {last['val']:.6g}")
    print(f"checkpoint -> {out}")


def cmd_finetune(args, cfg):
    world = _world(cfg)
    src = tr.load_checkpoint(args.from_, world.hash, force=args.force)
    ds, mask = _load_data(cfg, world, args.subject, args.data)
    frac = cfg.budget_fraction if args.budget_fraction is None else args.budget_fraction
    ckpt, report = tr.finetune_subject(src, ds, mask, world, cfg.train, frac, cfg.finetune_groups)
    out = Path(args.out) if args.out else cfg.root / "checkpoints" / args.subject
    tr.save_checkpoint(out, ckpt)
    dio._write_json(out / "report.json", pl.finetune_report_doc(report))
    pl.write_config_echo(out, cfg)
    print(f"{args.subject}: trained {report['n_train_used']} trials, trainable fraction "
          f"{report['trainable_fraction']:.6g} ({report['trainable_parameters']}"
          f"/{report['census']['total']}) -> {out}")


def cmd_reconstruct(args, cfg):
    world = _world(cfg)
    ckpt = tr.load_checkpoint(args.checkpoint, world.hash, force=args.force)
    ds, _ = _load_data(cfg, world, args.subject, args.data)
    rc = cfg.recon_config(args.mode)
    if args.s is not None:
        rc.s = args.s
    if args.denoiser is not None:
        rc.denoiser = args.denoiser
    if args.seed is not None:
        rc.seed = args.seed
    rc.validate()
    split = args.split or cfg.split
    res = pl.reconstruct_split(world, ckpt, ds, rc, split)
    out = Path(args.out) if args.out else cfg.root / "recon" / args.subject / rc.mode
    pl.save_recon(out, res, rc, args.subject, split, world.hash)
    pl.write_config_echo(out, cfg)
    print(f"{args.subject}/{rc.mode}: {len(res['ids'])} trials -> {out}")


def cmd_evaluate(args, cfg):
    world = _world(cfg)
    ids, images, m = pl.load_recon(args.recon_dir, world.hash)
    if args.subject and m["subject_id"] != args.subject:
        raise ConfigurationError(f"{args.recon_dir} holds subject {m['subject_id']!r}")
    extractors = tuple(args.extractors.split(",")) if args.extractors else cfg.extractors
    for e in extractors:
        if e not in ev.EXTRACTORS:
            raise ConfigurationError(f"unknown extractor {e!r}; expected one of {ev.EXTRACTORS}")
    rep = pl.evaluate_split(world, images, ids, extractors, cfg.seed, cfg.projection_dim,
                            {"subject": m["subject_id"], "mode": m["mode"], "split": m["split"]})
    out = Path(args.out) if args.out else Path(args.recon_dir) / "eval"
    path = ev.write_report(rep, out / "report.json")
    validate_document(dio._read_json(path), "report")
    pl.write_config_echo(out, cfg)
    for k in ev.METRIC_KEYS:
        v = rep.metrics[k]
        print(f"{k:28s} {'null' if v is None else f'{v:.6g}'}")


def cmd_weights_map(args, cfg):
    world = _world(cfg)
    ckpt = tr.load_checkpoint(args.checkpoint, world.hash, force=args.force)
    _, mask = _load_data(cfg, world, args.subject, args.data)
    out = Path(args.out) if args.out else cfg.root / "weights" / args.subject
    maps = pl.write_weight_maps(ckpt, mask, out)
    pl.write_config_echo(out, cfg)
    if cfg.figures:
        from . import plotting
        plotting.contribution_bars(maps, out / "contributions.png")
    for name, val in pl.dissociation_ratios(maps).items():
        print(f"{name}: {val:.6g}")


def cmd_pipeline(args, cfg):
    result = pl.run_pipeline(cfg, args.out, figures=False if args.no_figures else None)
    print(pl.format_summary(result["rows"]))
    print(f"summary -> {result['root'] / 'summary.csv'}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuroswift", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration JSON (defaults when omitted)")
        sp.set_defaults(func=fn)
        return sp

    sp = verb("world", cmd_world, "generate and save the frozen world")
    sp.add_argument("--out")

    sp = verb("synth", cmd_synth, "synthesize one subject's dataset")
    sp.add_argument("--subject", required=True)
    sp.add_argument("--out")

    sp = verb("train", cmd_train, "train adapters on one subject")
    sp.add_argument("--subject", required=True)
    sp.add_argument("--adapter", choices=("autokl", "clip", "both"), default="both")
    sp.add_argument("--data", help="subject dataset directory")
    sp.add_argument("--out")

    sp = verb("finetune", cmd_finetune, "adapt a pretrained checkpoint to a new subject")
    sp.add_argument("--from", dest="from_", required=True, metavar="CHECKPOINT")
    sp.add_argument("--subject", required=True)
    sp.add_argument("--budget-fraction", type=float)
    sp.add_argument("--data")
    sp.add_argument("--force", action="store_true", help="skip the world-hash check")
    sp.add_argument("--out")

    sp = verb("reconstruct", cmd_reconstruct, "reconstruct images for one split and mode")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subject", required=True)
    sp.add_argument("--split", choices=dio.SPLITS)
    sp.add_argument("--s", type=float, help="structural strength in (0, 1]")
    sp.add_argument("--mode", choices=("full", "only_z", "no_text", "no_image", "no_z"),
                    default="full")
    sp.add_argument("--denoiser", choices=("oracle", "gaussian", "attn"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--data")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--out")

    sp = verb("evaluate", cmd_evaluate, "score a reconstruction directory")
    sp.add_argument("--recon-dir", required=True)
    sp.add_argument("--subject")
    sp.add_argument("--extractors", help="comma list of pixels,random_projection,frozen_clip")
    sp.add_argument("--out")

    sp = verb("weights-map", cmd_weights_map, "per-voxel contribution maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subject", required=True)
    sp.add_argument("--data")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--out")

    sp = verb("pipeline", cmd_pipeline, "run every stage end to end")
    sp.add_argument("--out", help="artifact root (overrides paths.root)")
    sp.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        pl.worker_count()
        cfg = load_config(args.config)
        args.func(args, cfg)
    except NeuroSwiftError as exc:
        print(f"neuroswift: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"neuroswift: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
