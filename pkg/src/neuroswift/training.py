"""Adapter optimisation, cross-subject fine-tuning and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import adapters as ad
from . import dataio as dio
from . import frozen as fr
from . import objectives as obj
from .errors import CompatibilityError, ConfigurationError, DimensionError, FormatError
from .numcore import LayerParams, RngStream

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LR_SCHEDULES = ("cosine", "constant")


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # decoupled decay, applied only to weights that feed a norm layer
    weight_decay: float = 6.0
    temp: float = 0.1
    dropout: float = 0.1
    hidden: int = 128
    blocks: int = 2
    seed: int = 0
    report_every: int = 1
    # per-epoch learning-rate shape: "cosine" anneals to zero, "constant" does not
    lr_schedule: str = "cosine"

    def validate(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        return self

    def epoch_lr(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"train: unknown keys {sorted(unknown)}")
        return cls(**d).validate()


# ------------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
              decay=None) -> AdamState:
    """In-place Adam update of every array in ``params`` that has a gradient.

    ``weight_decay`` shrinks the names in ``decay`` (all by default) by
    ``lr * weight_decay`` before the moment step.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"adam: {name} param{p.shape} vs grad{g.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if weight_decay and (decay is None or name in decay):
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# --------------------------------------------------------------------- batching


def _batches(n, batch_size, rng: RngStream):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _trainable(adapter, groups):
    tensors = adapter.tensors()
    tags = adapter.groups()
    return {k: v for k, v in tensors.items() if tags[k] in groups}


def _fit(adapter, step_fn, eval_fn, n_train, config: TrainConfig, groups, rng: RngStream,
         epoch_hook=None, tag=""):
    params = _trainable(adapter, groups)
    decay = adapter.scale_free() & set(params)
    state = AdamState()
    history = []
    for epoch in range(config.epochs):
        erng = rng.child(f"epoch{epoch}")
        lr = config.epoch_lr(epoch)
        seen, total = 0, 0.0
        for bi, idx in enumerate(_batches(n_train, config.batch_size, erng.child("order"))):
            loss, grads = step_fn(idx, erng.child(f"batch{bi}"))
            grads = {k: g for k, g in ad.flat_grads(grads).items() if k in params}
            adam_step(params, grads, state, lr,
                      (config.beta1, config.beta2), config.adam_eps, config.weight_decay, decay)
            total += loss * len(idx)
            seen += len(idx)
        row = {"epoch": epoch + 1, "train": total / seen, **eval_fn()}
        history.append(row)
        if epoch_hook is not None:
            epoch_hook(epoch, row)
        if config.report_every and (epoch + 1) % config.report_every == 0:
            log.info("%s epoch %d train %.5f val %.5f", tag, epoch + 1, row["train"], row.get("val", float("nan")))
    return history


# ---------------------------------------------------------------------- targets


def latent_targets(world: dio.World, ids):
    """Ground-truth latents: the frozen encoder applied to the stimulus images."""
    _, _, images = world.stimuli(ids)
    return fr.autokl_encode(world.frozen, images)


def _split(dataset, split, limit=None):
    v, ids = dataset.part(split, limit)
    if split == "train" and len(v) == 0:
        raise ConfigurationError(f"{dataset.subject_id}: empty train split")
    return v, ids


def autokl_dims(world, n_voxels, config: TrainConfig):
    w = world.config
    return ad.AutoKLDims(voxels=n_voxels, hidden=config.hidden, blocks=config.blocks,
                         channels=w.latent_channels, low_height=w.latent_height,
                         low_width=w.latent_width, factor=w.upsample, dropout=config.dropout)


def clip_dims(world, n_voxels, config: TrainConfig):
    w = world.config
    return ad.ClipDims(voxels=n_voxels, hidden=config.hidden, blocks=config.blocks,
                       img_tokens=w.img_tokens, txt_tokens=w.txt_tokens, token_dim=w.token_dim,
                       dropout=config.dropout)


def train_autokl(dataset, world, config: TrainConfig, adapter=None, groups=None,
                 train_limit=None, epoch_hook=None):
    config.validate()
    rng = RngStream(config.seed, f"train/autokl/{dataset.subject_id}")
    v_tr, ids_tr = _split(dataset, "train", train_limit)
    v_va, ids_va = _split(dataset, "val")
    z_tr, z_va = latent_targets(world, ids_tr), latent_targets(world, ids_va)
    if adapter is None:
        adapter = ad.AutoKLAdapter.init(autokl_dims(world, dataset.n_voxels, config), rng.child("init"))
    if adapter.dims.voxels != dataset.n_voxels:
        raise DimensionError(f"adapter width {adapter.dims.voxels} != dataset {dataset.n_voxels}")

    def step(idx, brng):
        z, cache = adapter.forward(v_tr[idx], "train", brng, return_cache=True)
        loss, dz = obj.mse_loss(z, z_tr[idx])
        _, grads = adapter.backward(dz, cache)
        return loss.scalar, grads

    def evaluate():
        if not len(v_va):
            return {"val": float("nan")}
        return {"val": obj.mse_loss(adapter.forward(v_va), z_va)[0].scalar}

    groups = set(groups or ad.GROUP_TAGS)
    history = _fit(adapter, step, evaluate, len(v_tr), config, groups, rng.child("fit"),
                   epoch_hook, "autokl")
    return adapter, history


def train_clip(dataset, world, config: TrainConfig, adapter=None, groups=None,
               train_limit=None, epoch_hook=None):
    config.validate()
    rng = RngStream(config.seed, f"train/clip/{dataset.subject_id}")
    v_tr, ids_tr = _split(dataset, "train", train_limit)
    v_va, ids_va = _split(dataset, "val")
    txt_tr, img_tr = world.semantic_targets(ids_tr)
    txt_va, img_va = world.semantic_targets(ids_va)
    if adapter is None:
        adapter = ad.ClipAdapter.init(clip_dims(world, dataset.n_voxels, config), rng.child("init"))
    if adapter.dims.voxels != dataset.n_voxels:
        raise DimensionError(f"adapter width {adapter.dims.voxels} != dataset {dataset.n_voxels}")

    def step(idx, brng):
        (e_img, e_txt), cache = adapter.forward(v_tr[idx], "train", brng, return_cache=True)
        li, gi = obj.clip_image_loss(e_img, img_tr[idx], config.temp)
        lt, gt = obj.clip_text_loss(e_txt, txt_tr[idx], config.temp)
        _, grads = adapter.backward(gi, gt, cache)
        return li.scalar + lt.scalar, grads

    def evaluate():
        if not len(v_va):
            return {"val": float("nan")}
        e_img, e_txt = adapter.forward(v_va)
        li, _ = obj.clip_image_loss(e_img, img_va, config.temp)
        lt, _ = obj.clip_text_loss(e_txt, txt_va, config.temp)
        return {"val": li.scalar + lt.scalar, "val_mse": li.terms["mse"] + lt.terms["mse"]}

    groups = set(groups or ad.GROUP_TAGS)
    history = _fit(adapter, step, evaluate, len(v_tr), config, groups, rng.child("fit"),
                   epoch_hook, "clip")
    return adapter, history


# ------------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    autokl: ad.AutoKLAdapter | None
    clip: ad.ClipAdapter | None
    world_hash: str
    subject_id: str
    history: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
    meta: dict = field(default_factory=dict)

    def adapters(self):
        return [a for a in (self.autokl, self.clip) if a is not None]


def tensor_hash(adapters, groups) -> str:
    h = hashlib.sha256()
    for a in adapters:
        tags = a.groups()
        for name, arr in a.tensors().items():
            if tags[name] in groups:
                h.update(f"{a.kind}.{name}".encode())
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _digest(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    adapters = {}
    for a in ckpt.adapters():
        layers = {}
        for layer, lp in a.params.items():
            files = {}
            for k, arr in lp.tensors.items():
                fname = f"tensors/{a.kind}.{layer}.{k}.nstf"
                dio.nstf_write(root / fname, arr)
                files[k] = {"file": fname, "shape": list(arr.shape), "sha256": _digest(arr)}
            layers[layer] = {"kind": lp.kind, "group": lp.group_tag, "tensors": files}
        adapters[a.kind] = {"dims": asdict(a.dims), "layers": layers}
    manifest = {
        "format": "neuroswift-checkpoint",
        "version": ckpt.version,
        "world_hash": ckpt.world_hash,
        "subject_id": ckpt.subject_id,
        "adapters": adapters,
        "meta": ckpt.meta,
        "history": "history.csv",
    }
    _write_history(root / "history.csv", ckpt.history)
    dio._write_json(root / "manifest.json", manifest)
    return root


def load_checkpoint(path, world_hash: str | None = None, force: bool = False) -> Checkpoint:
    root = Path(path)
    m = dio._read_json(root / "manifest.json")
    if m.get("format") != "neuroswift-checkpoint":
        raise FormatError(f"{root}: not a checkpoint manifest")
    if m.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{root}: checkpoint version {m.get('version')} unsupported")
    if world_hash is not None and m["world_hash"] != world_hash and not force:
        raise CompatibilityError(f"{root}: checkpoint was trained on a different world")
    built = {}
    for kind, spec in m["adapters"].items():
        cls = ad.ADAPTERS[kind]
        params = {}
        for layer, lspec in spec["layers"].items():
            tensors = {}
            for k, t in lspec["tensors"].items():
                arr = dio.nstf_read(root / t["file"])
                if list(arr.shape) != t["shape"]:
                    raise FormatError(f"{t['file']}: shape {arr.shape} != manifest {t['shape']}")
                if "sha256" in t and _digest(arr) != t["sha256"]:
                    raise FormatError(f"{t['file']}: payload does not match its manifest digest")
                tensors[k] = arr
            params[layer] = LayerParams(lspec["kind"], tensors, lspec["group"])
        built[kind] = cls(cls.dims_cls(**spec["dims"]), params)
    history = _read_history(root / "history.csv") if (root / "history.csv").exists() else {}
    return Checkpoint(built.get("autokl"), built.get("clip"), m["world_hash"], m["subject_id"],
                      history, m["version"], m.get("meta", {}))


def _write_history(path, history: dict):
    rows = []
    for adapter, epochs in history.items():
        for row in epochs:
            for split, value in row.items():
                if split != "epoch":
                    rows.append({"adapter": adapter, "epoch": row["epoch"], "split": split,
                                 "loss": repr(float(value))})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["adapter", "epoch", "split", "loss"])
        w.writeheader()
        w.writerows(rows)


def _read_history(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            epochs = out.setdefault(r["adapter"], {})
            epochs.setdefault(int(r["epoch"]), {"epoch": int(r["epoch"])})[r["split"]] = float(r["loss"])
    return {k: [v[e] for e in sorted(v)] for k, v in out.items()}


# --------------------------------------------------------------------- protocol


def init_adapter(kind, dataset, world, config: TrainConfig):
    """The exact initial state ``train_autokl``/``train_clip`` would start from."""
    rng = RngStream(config.seed, f"train/{kind}/{dataset.subject_id}").child("init")
    dims = (autokl_dims if kind == "autokl" else clip_dims)(world, dataset.n_voxels, config)
    return ad.ADAPTERS[kind].init(dims, rng)


def pretrain(dataset, world, config: TrainConfig, which=("autokl", "clip")) -> Checkpoint:
    """Train the adapters in ``which``; the others are kept at their seeded initial state."""
    unknown = set(which) - set(ad.ADAPTERS)
    if unknown or not which:
        raise ConfigurationError(f"cannot train adapters {sorted(unknown) or which}")
    trainers = {"autokl": train_autokl, "clip": train_clip}
    built, history, state = {}, {}, {}
    for kind in ad.ADAPTERS:
        if kind in which:
            built[kind], history[kind] = trainers[kind](dataset, world, config)
            state[kind] = "trained"
        else:
            built[kind] = init_adapter(kind, dataset, world, config)
            state[kind] = "init"
    return Checkpoint(built["autokl"], built["clip"], world.hash, dataset.subject_id, history,
                      meta={"train": asdict(config), "adapter_state": state})


def budget_trials(n_train: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"budget fraction must lie in (0, 1], got {fraction}")
    return max(1, math.floor(fraction * n_train))


def finetune_subject(ckpt: Checkpoint, dataset, mask: dio.RoiMask, world, config: TrainConfig,
                     budget_fraction: float = 0.125, groups=("fc_input", "head")):
    """Re-fit only the voxel-facing layers and heads of a pretrained pair for a new subject.

    Returns the new checkpoint and a report with the exact trainable fraction
    and per-epoch losses. Frozen groups are hashed after every epoch.
    """
    if ckpt.world_hash != world.hash:
        raise CompatibilityError("checkpoint and dataset come from different worlds")
    if dataset.n_voxels != mask.total_voxels:
        raise DimensionError("dataset width disagrees with its mask")
    groups = tuple(groups)
    frozen_groups = tuple(g for g in ad.GROUP_TAGS if g not in groups)
    rng = RngStream(config.seed, f"finetune/{dataset.subject_id}")
    n_train = len(dataset.indices("train"))
    limit = budget_trials(n_train, budget_fraction)

    new = [ad.reinit_input_layers(a, dataset.n_voxels, rng.child(a.kind)) for a in ckpt.adapters()]
    frozen_before = tensor_hash(new, frozen_groups)
    checks = []

    def guard(epoch, row):
        h = tensor_hash(new, frozen_groups)
        checks.append(h == frozen_before)
        if h != frozen_before:
            raise RuntimeError(f"frozen parameters changed during epoch {epoch + 1}")

    history = {}
    out = {}
    for a in new:
        train = train_autokl if a.kind == "autokl" else train_clip
        out[a.kind], history[a.kind] = train(dataset, world, config, adapter=a, groups=groups,
                                             train_limit=limit, epoch_hook=guard)
    census = ad.param_census(new)
    report = {
        "subject_id": dataset.subject_id,
        "source_subject": ckpt.subject_id,
        "trainable_groups": list(groups),
        "frozen_groups": list(frozen_groups),
        "census": census,
        "trainable_parameters": sum(census[g] for g in groups),
        "trainable_fraction": sum(census[g] for g in groups) / census["total"],
        "budget_fraction": budget_fraction,
        "n_train_used": limit,
        "frozen_hash": frozen_before,
        "frozen_hash_checks": checks,
        "history": history,
    }
    new_ckpt = Checkpoint(out.get("autokl"), out.get("clip"), world.hash, dataset.subject_id,
                          history, meta={"finetuned_from": ckpt.subject_id, "train": asdict(config),
                                         "budget_fraction": budget_fraction})
    return new_ckpt, report


def from_scratch(dataset, world, config: TrainConfig, budget_fraction: float = 0.125,
                 which=("autokl", "clip")) -> Checkpoint:
    """Baseline for the fine-tune protocol: fresh adapters on the same trial budget."""
    limit = budget_trials(len(dataset.indices("train")), budget_fraction)
    autokl = clip = None
    history = {}
    if "autokl" in which:
        autokl, history["autokl"] = train_autokl(dataset, world, config, train_limit=limit)
    if "clip" in which:
        clip, history["clip"] = train_clip(dataset, world, config, train_limit=limit)
    return Checkpoint(autokl, clip, world.hash, dataset.subject_id, history,
                      meta={"scratch_budget": budget_fraction})
