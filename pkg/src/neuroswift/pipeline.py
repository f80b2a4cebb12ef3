"""Stage functions shared by the CLI verbs and the end-to-end pipeline."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio as dio
from . import diffusion as df
from . import evaluation as ev
from . import training as tr
from .errors import CompatibilityError, ConfigurationError, FormatError, StorageError
from .numcore import RngStream

log = logging.getLogger(__name__)

THREADS_ENV = "NEUROSWIFT_THREADS"
PPM_RANGE = (-1.0, 1.0)


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be >= 1")
    return n


def ordered_map(fn, items, threads: int | None = None) -> list:
    """``map`` with an optional thread pool; results keep input order."""
    threads = worker_count() if threads is None else threads
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ predictions


def predict(ckpt: tr.Checkpoint, dataset: dio.SubjectDataset, split: str, world):
    """Adapter outputs for one split: (ids, z_pred, e_img, e_txt); missing adapters give None."""
    v, ids = dataset.part(split)
    if not len(ids):
        raise ConfigurationError(f"{dataset.subject_id}: split {split!r} is empty")
    for a in ckpt.adapters():
        if a.dims.voxels != dataset.n_voxels:
            raise CompatibilityError(f"{a.kind} adapter expects {a.dims.voxels} voxels, "
                                     f"dataset {dataset.subject_id} has {dataset.n_voxels}")
    z = ckpt.autokl.forward(v) if ckpt.autokl is not None else None
    e_img = e_txt = None
    if ckpt.clip is not None:
        e_img, e_txt = ckpt.clip.forward(v)
    return ids, z, e_img, e_txt


def trial_rng(seed: int, stimulus_id: int) -> RngStream:
    # keyed by stimulus only, so modes and subjects see the same sampler noise
    return RngStream(seed, "reconstruct").child(int(stimulus_id))


def reconstruct_split(world, ckpt, dataset, rc: df.ReconstructionConfig, split="shared_test",
                      threads=None) -> dict:
    rc.validate()
    ids, z, e_img, e_txt = predict(ckpt, dataset, split, world)
    if z is None:
        if rc.mode != "no_z":
            raise ConfigurationError(f"mode {rc.mode!r} needs a trained AutoKL adapter")
        z = np.zeros((len(ids),) + world.frozen.latent.dims)
    if e_img is None and rc.mode != "only_z":
        raise ConfigurationError(f"mode {rc.mode!r} needs a trained CLIP adapter")
    schedule = rc.schedule()

    def one(i):
        txt = None if e_txt is None else e_txt[i]
        img = None if e_img is None else e_img[i]
        return df.reconstruct(z[i], txt, img, rc, schedule, world, trial_rng(rc.seed, ids[i]))

    out = ordered_map(one, range(len(ids)), threads)
    return {"ids": ids, "z_pred": z, "z_final": np.stack([o[0] for o in out]),
            "images": np.stack([o[1] for o in out])}


def evaluate_split(world, images, ids, extractors=ev.EXTRACTORS, seed=0, dim=256, config=None):
    _, _, gts = world.stimuli(ids)
    return ev.evaluate_images(images, gts, extractors, world=world, seed=seed, dim=dim,
                              trial_ids=ids, config=config)


# ------------------------------------------------------------------ recon files


def write_ppm(path, image, value_range=PPM_RANGE):
    """Binary PPM (P6) view of a channels-first image; values outside the range are clipped."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise ConfigurationError(f"PPM needs 1 or 3 channels, got {img.shape[0]}")
    lo, hi = value_range
    u8 = np.round(np.clip((img - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)
    h, w = u8.shape[1:]
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(u8.transpose(1, 2, 0)).tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit P6 file")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3).transpose(2, 0, 1)


def save_recon(out, result: dict, rc: df.ReconstructionConfig, subject_id: str, split: str,
               world_hash: str) -> Path:
    out = Path(out)
    for sub in ("images", "latents"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    trials = []
    for sid, img, z in zip(result["ids"], result["images"], result["z_final"]):
        stem = f"{int(sid):010d}"
        dio.nstf_write(out / "images" / f"{stem}.nstf", img)
        dio.nstf_write(out / "latents" / f"{stem}.nstf", z)
        write_ppm(out / "images" / f"{stem}.ppm", img)
        trials.append({"stimulus_id": int(sid), "image": f"images/{stem}.nstf",
                       "latent": f"latents/{stem}.nstf", "ppm": f"images/{stem}.ppm"})
    dio._write_json(out / "manifest.json", {
        "format": "neuroswift-recon", "version": 1, "subject_id": subject_id, "split": split,
        "mode": rc.mode, "world_hash": world_hash, "reconstruct": asdict(rc),
        "ppm_range": list(PPM_RANGE), "trials": trials,
    })
    return out


def load_recon(root, world_hash: str | None = None):
    root = Path(root)
    m = dio._read_json(root / "manifest.json")
    if m.get("format") != "neuroswift-recon":
        raise FormatError(f"{root}: not a reconstruction manifest")
    if world_hash is not None and m["world_hash"] != world_hash:
        raise CompatibilityError(f"{root}: reconstructions come from a different world")
    ids = np.array([t["stimulus_id"] for t in m["trials"]], dtype=np.int64)
    images = np.stack([dio.nstf_read(root / t["image"]) for t in m["trials"]])
    return ids, images, m


# ------------------------------------------------------------- contribution map


def write_weight_maps(ckpt: tr.Checkpoint, mask: dio.RoiMask, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    maps = {}
    for a in ckpt.adapters():
        cmap = ev.contribution_map(a, mask)
        ev.write_contributions_csv(cmap, out / f"{a.kind}_contributions.csv")
        maps[a.kind] = cmap
    with open(out / "region_means.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["adapter", "region", "n_voxels", "mean_contribution"])
        for kind, cmap in maps.items():
            for name, ix in mask.regions:
                w.writerow([kind, name, len(ix), f"{cmap.region_means[name]:.6g}"])
    return maps


def dissociation_ratios(maps: dict) -> dict:
    hi = list(dio.SEMANTIC_REGIONS)
    out = {}
    if "autokl" in maps:
        out["autokl_early_over_higher"] = maps["autokl"].ratio(["Early"], hi)
    if "clip" in maps:
        out["clip_higher_over_early"] = maps["clip"].ratio(hi, ["Early"])
    return out


# --------------------------------------------------------------------- pipeline


def write_config_echo(out, cfg):
    dio._write_json(Path(out) / "config.json", cfg.echo())


def world_from_config(cfg):
    return dio.generate_world(config=cfg.world)


def synth_subject(world, cfg, subject_id):
    spec = cfg.subject(subject_id)
    return dio.generate_subject(world, spec.id, spec.n_train, spec.n_val, roi_spec=spec.roi_sizes,
                                mask_mode=spec.mask_mode)


SUMMARY_FIELDS = ("subject", "mode", "metric", "value")


def write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([r["subject"], r["mode"], r["metric"],
                        "" if r["value"] is None else f"{r['value']:.6g}"])


def format_summary(rows, metrics=None) -> str:
    """Wide text table: one line per (subject, mode), one column per metric."""
    metrics = metrics or list(dict.fromkeys(r["metric"] for r in rows))
    cells = {}
    for r in rows:
        cells.setdefault((r["subject"], r["mode"]), {})[r["metric"]] = r["value"]
    head = ["subject", "mode"] + list(metrics)
    lines = [head]
    for (subj, mode), vals in cells.items():
        lines.append([subj, mode] + ["-" if vals.get(m) is None else f"{vals[m]:.4g}" for m in metrics])
    widths = [max(len(str(row[i])) for row in lines) for i in range(len(head))]
    return "\n".join("  ".join(str(c).ljust(wd) for c, wd in zip(row, widths)).rstrip() for row in lines)


def run_pipeline(cfg, root=None, figures=None) -> dict:
    """world -> synth -> pretrain(first subject) -> finetune(rest) -> reconstruct -> evaluate -> weights."""
    from . import plotting

    root = Path(cfg.root if root is None else root)
    figures = cfg.figures if figures is None else figures
    root.mkdir(parents=True, exist_ok=True)
    write_config_echo(root, cfg)

    world = world_from_config(cfg)
    dio.save_world(world, root / "world")
    data = {}
    for spec in cfg.subjects:
        ds, mask = synth_subject(world, cfg, spec.id)
        dio.save_subject(ds, mask, root / "subjects" / spec.id, world.hash)
        data[spec.id] = (ds, mask)
    log.info("world %s, %d subjects", world.hash[:12], len(data))

    first = cfg.subjects[0].id
    ckpts = {first: tr.pretrain(data[first][0], world, cfg.train)}
    tr.save_checkpoint(root / "checkpoints" / first, ckpts[first])
    finetune_reports = {}
    for spec in cfg.subjects[1:]:
        ds, mask = data[spec.id]
        ck, report = tr.finetune_subject(ckpts[first], ds, mask, world, cfg.train,
                                         cfg.budget_fraction, cfg.finetune_groups)
        ckpts[spec.id] = ck
        finetune_reports[spec.id] = report
        tr.save_checkpoint(root / "checkpoints" / spec.id, ck)
        dio._write_json(root / "checkpoints" / spec.id / "report.json", finetune_report_doc(report))

    rows, grids, ratios = [], {}, {}
    for spec in cfg.subjects:
        ds, mask = data[spec.id]
        per_mode = {}
        for mode in cfg.modes:
            rc = cfg.recon_config(mode)
            res = reconstruct_split(world, ckpts[spec.id], ds, rc, cfg.split)
            save_recon(root / "recon" / spec.id / mode, res, rc, spec.id, cfg.split, world.hash)
            rep = evaluate_split(world, res["images"], res["ids"], cfg.extractors, cfg.seed,
                                 cfg.projection_dim, {"subject": spec.id, "mode": mode,
                                                      "split": cfg.split})
            ev.write_report(rep, root / "eval" / spec.id / mode / "report.json")
            for k in ev.METRIC_KEYS:
                rows.append({"subject": spec.id, "mode": mode, "metric": k, "value": rep.metrics[k]})
            per_mode[mode] = res
        grids[spec.id] = per_mode
        maps = write_weight_maps(ckpts[spec.id], mask, root / "weights" / spec.id)
        ratios[spec.id] = dissociation_ratios(maps)
        if figures:
            fig_dir = root / "figures"
            fig_dir.mkdir(exist_ok=True)
            _, _, gts = world.stimuli(next(iter(per_mode.values()))["ids"])
            plotting.recon_grid(gts, {m: r["images"] for m, r in per_mode.items()},
                                fig_dir / f"recon_grid_{spec.id}.png")
            plotting.contribution_bars(maps, fig_dir / f"contributions_{spec.id}.png")
            plotting.loss_curves(ckpts[spec.id].history, fig_dir / f"loss_{spec.id}.png")

    write_summary(rows, root / "summary.csv")
    dio._write_json(root / "interpretability.json", ratios)
    if figures:
        plotting.ablation_bars(rows, root / "figures" / "ablation.png")
    return {"root": root, "rows": rows, "world": world, "checkpoints": ckpts,
            "finetune_reports": finetune_reports, "ratios": ratios}


def finetune_report_doc(report: dict) -> dict:
    """JSON-safe copy of a fine-tune report."""
    return json.loads(json.dumps(report, default=float))
