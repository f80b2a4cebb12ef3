"""Tensor files, ROI masks and the synthetic subject generator.

NSTF layout (little endian)::

    b"NSTF" | version u32 | dtype u32 (0 = f64) | ndim u32 | dims u64 * ndim | payload

A world is a seeded bundle of frozen components plus a stimulus bank. Each
stimulus has a semantic code ``c`` and a block-constant structural residual
``r``; its latent is ``G c + up(r)`` and its image the frozen decode of that
latent. Early/Mid* voxels read the latent, Ventral/Lateral/Parietal voxels
read the code, each through subject-specific random weights plus noise.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import frozen as fr
from . import numcore as nc
from .errors import BoundsError, CompatibilityError, ConfigurationError, FormatError, StorageError
from .numcore import RngStream

NSTF_MAGIC = b"NSTF"
NSTF_VERSION = 1
DTYPE_F64 = 0

REGIONS = ("Early", "Midventral", "Midlateral", "Midparietal", "Ventral", "Lateral", "Parietal")
STRUCTURAL_REGIONS = REGIONS[:4]
SEMANTIC_REGIONS = REGIONS[4:]
SPLITS = ("train", "val", "shared_test")


# ------------------------------------------------------------------------- NSTF


def nstf_write(path, tensor) -> None:
    arr = np.asarray(tensor, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    header = NSTF_MAGIC + struct.pack("<III", NSTF_VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes(order="C"))
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def nstf_read(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 16:
        raise StorageError(f"{path}: truncated header")
    if blob[:4] != NSTF_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, dtype, ndim = struct.unpack("<III", blob[4:16])
    if version != NSTF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F64:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    end = 16 + 8 * ndim
    if len(blob) < end:
        raise StorageError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}Q", blob[16:end])
    payload = blob[end:]
    expected = 8 * int(np.prod(dims, dtype=np.int64))
    if len(payload) != expected:
        raise StorageError(f"{path}: payload has {len(payload)} bytes, dims need {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


# ------------------------------------------------------------------------ world


def _default_roi_sizes():
    return {"Early": 160, "Midventral": 48, "Midlateral": 32, "Midparietal": 32,
            "Ventral": 96, "Lateral": 72, "Parietal": 72}


def _default_coding():
    return {r: [1.0, 0.0] if r in STRUCTURAL_REGIONS else [0.0, 1.0] for r in REGIONS}


@dataclass
class WorldConfig:
    seed: int = 0
    latent_channels: int = 4
    latent_height: int = 4
    latent_width: int = 4
    upsample: int = 2
    image_channels: int = 3
    image_height: int = 16
    image_width: int = 16
    code_dim: int = 16
    txt_tokens: int = 8
    img_tokens: int = 16
    token_dim: int = 32
    semantic_var: float = 0.16
    structure_var: float = 1.0
    sigma_sem: float = 0.05
    pos_scale: float = 0.1
    denoiser_ff: int = 64
    n_shared: int = 100
    roi_sizes: dict = field(default_factory=_default_roi_sizes)
    region_snr: dict = field(default_factory=lambda: {r: 4.0 for r in REGIONS})
    coding: dict = field(default_factory=_default_coding)
    size_jitter: float = 0.15
    template_band: float = 0.6
    template_offcortex: float = 0.8
    template_swap: float = 0.5

    def validate(self):
        for name in ("latent_channels", "latent_height", "latent_width", "upsample",
                     "image_channels", "image_height", "image_width", "code_dim",
                     "txt_tokens", "img_tokens", "token_dim", "n_shared"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"world.{name} must be >= 1")
        if self.semantic_var <= 0 or self.structure_var < 0:
            raise ConfigurationError("world variances must be positive")
        for key, what in ((self.roi_sizes, "roi_sizes"), (self.region_snr, "region_snr"),
                          (self.coding, "coding")):
            unknown = set(key) - set(REGIONS)
            if unknown:
                raise ConfigurationError(f"world.{what}: unknown regions {sorted(unknown)}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"world: unknown keys {sorted(unknown)}")
        cfg = cls(**d)
        # allow partial region maps on top of defaults
        cfg.roi_sizes = {**_default_roi_sizes(), **dict(d.get("roi_sizes", {}))}
        cfg.region_snr = {**{r: 4.0 for r in REGIONS}, **dict(d.get("region_snr", {}))}
        cfg.coding = {**_default_coding(), **dict(d.get("coding", {}))}
        return cfg.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class World:
    config: WorldConfig
    frozen: fr.FrozenWorldComponents
    hash: str = ""

    @property
    def G(self):
        return self.frozen.G

    @property
    def seed(self):
        return self.config.seed

    @property
    def shared_ids(self) -> np.ndarray:
        return np.arange(self.config.n_shared, dtype=np.int64)

    def stimuli(self, ids):
        """Codes, latents and images for stimulus ids (deterministic per id)."""
        fz = self.frozen
        ids = np.asarray(ids, dtype=np.int64)
        low = fz.latent.low_dims
        codes = np.empty((len(ids), fz.code_dim))
        resid = np.empty((len(ids),) + low)
        root = RngStream(self.seed, "stimulus")
        sd = math.sqrt(self.config.structure_var)
        for i, sid in enumerate(ids):
            r = root.child(int(sid))
            codes[i] = r.normal(fz.code_dim)
            resid[i] = sd * r.normal(low)
        latents = (codes @ fz.G.T).reshape((len(ids),) + fz.latent.dims)
        latents += nc.upsample_nearest(resid, fz.latent.factor)
        return codes, latents, fr.autokl_decode(fz, latents)

    def semantic_targets(self, ids):
        """CLIP text/image targets per stimulus: text from the code, image from its semantic image."""
        fz = self.frozen
        codes, _, _ = self.stimuli(ids)
        root = RngStream(self.seed, "semantic_image")
        sem_imgs = np.stack([
            fr.semantic_image_gen(fz, c, root.child(int(s)), self.config.sigma_sem)
            for c, s in zip(codes, np.asarray(ids))
        ]) if len(codes) else np.empty((0,) + fz.image_dims)
        return fr.clip_text_encode(fz, codes), fr.clip_image_encode(fz, sem_imgs)


def world_hash(config: WorldConfig, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def generate_world(seed: int | None = None, config: WorldConfig | None = None) -> World:
    config = WorldConfig() if config is None else config
    if seed is not None:
        config = WorldConfig.from_dict({**config.to_dict(), "seed": int(seed)})
    config.validate()
    frozen = fr.build_frozen(config, RngStream(config.seed, "world"))
    return World(config, frozen, world_hash(config, frozen.arrays()))


def save_world(world: World, root) -> Path:
    root = Path(root)
    tdir = root / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in world.frozen.arrays().items():
        fname = f"tensors/{name}.nstf"
        nstf_write(root / fname, arr)
        files[name] = fname
    manifest = {
        "format": "neuroswift-world",
        "version": 1,
        "hash": world.hash,
        "config": world.config.to_dict(),
        "tensors": files,
    }
    _write_json(root / "manifest.json", manifest)
    return root


def load_world(root) -> World:
    root = Path(root)
    manifest = _read_json(root / "manifest.json")
    if manifest.get("format") != "neuroswift-world":
        raise FormatError(f"{root}: not a world manifest")
    config = WorldConfig.from_dict(manifest["config"])
    arrays = {name: nstf_read(root / f) for name, f in manifest["tensors"].items()}
    digest = world_hash(config, arrays)
    if digest != manifest["hash"]:
        raise FormatError(f"{root}: world tensors do not match manifest hash")
    latent = fr.LatentShape(config.latent_channels, config.latent_height * config.upsample,
                            config.latent_width * config.upsample, config.upsample)
    den = {}
    for name, arr in arrays.items():
        if name.startswith("denoiser."):
            _, layer, key = name.split(".")
            den.setdefault(layer, {})[key] = arr
    denoiser = {
        layer: nc.LayerParams("attention" if layer == "attn" else "linear", t, "core")
        for layer, t in sorted(den.items())
    }
    G = arrays["G"]
    frozen = fr.FrozenWorldComponents(
        latent=latent,
        image_dims=(config.image_channels, config.image_height, config.image_width),
        D_dec=arrays["D_dec"], G=G, G_pinv=np.linalg.pinv(G),
        T_txt_map=arrays["T_txt_map"], T_img_map=arrays["T_img_map"],
        pos_txt=arrays["pos_txt"], pos_img=arrays["pos_img"],
        structure_var=config.structure_var, denoiser=denoiser,
    )
    return World(config, frozen, digest)


# ------------------------------------------------------------------------ masks


@dataclass
class RoiMask:
    subject_id: str
    regions: list  # [(name, index array)]
    total_voxels: int

    def __post_init__(self):
        self.regions = [(str(n), np.asarray(ix, dtype=np.int64)) for n, ix in self.regions]
        self.validate()

    def validate(self):
        seen = np.zeros(self.total_voxels, dtype=bool)
        for name, ix in self.regions:
            if name not in REGIONS:
                raise ConfigurationError(f"unknown region {name!r}")
            if ix.size and (ix.min() < 0 or ix.max() >= self.total_voxels):
                raise BoundsError(f"region {name} indexes outside [0, {self.total_voxels})")
            if seen[ix].any() or len(np.unique(ix)) != ix.size:
                raise ConfigurationError(f"region {name} overlaps another region")
            seen[ix] = True
        if not seen.all():
            raise ConfigurationError("regions do not cover every voxel")

    def region(self, name) -> np.ndarray:
        for n, ix in self.regions:
            if n == name:
                return ix
        raise KeyError(name)

    @property
    def names(self):
        return [n for n, _ in self.regions]

    def labels(self) -> list[str]:
        out = [""] * self.total_voxels
        for name, ix in self.regions:
            for i in ix:
                out[i] = name
        return out

    def to_dict(self):
        return {"subject_id": self.subject_id, "total_voxels": self.total_voxels,
                "regions": [{"name": n, "indices": ix.tolist()} for n, ix in self.regions]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["subject_id"], [(r["name"], r["indices"]) for r in d["regions"]],
                   int(d["total_voxels"]))

    @classmethod
    def contiguous(cls, subject_id, sizes: dict):
        regions, start = [], 0
        for name in REGIONS:
            n = int(sizes.get(name, 0))
            if n:
                regions.append((name, np.arange(start, start + n)))
                start += n
        return cls(subject_id, regions, start)


def apply_mask(full_voxels, mask: RoiMask, region_subset=None) -> np.ndarray:
    full_voxels = nc.as_tensor(full_voxels)
    names = mask.names if region_subset is None else list(region_subset)
    cols = [mask.region(n) for n in names]
    idx = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    if idx.size and (idx.max() >= full_voxels.shape[-1] or idx.min() < 0):
        raise BoundsError(f"mask index outside voxel width {full_voxels.shape[-1]}")
    return full_voxels[..., idx]


# ---------------------------------------------------------------------- subjects


@dataclass
class SubjectDataset:
    subject_id: str
    voxels: np.ndarray
    stimulus_ids: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        self.voxels = nc.as_tensor(self.voxels)
        self.stimulus_ids = np.asarray(self.stimulus_ids, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        if not (len(self.voxels) == len(self.stimulus_ids) == len(self.split)):
            raise ConfigurationError("voxels, stimulus_ids and split disagree on trial count")
        bad = set(self.split) - set(SPLITS)
        if bad:
            raise ConfigurationError(f"unknown split tags {sorted(bad)}")

    @property
    def n_voxels(self) -> int:
        return self.voxels.shape[1]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def part(self, split: str, limit: int | None = None):
        ix = self.indices(split)
        if limit is not None:
            ix = ix[:limit]
        return self.voxels[ix], self.stimulus_ids[ix]


def subject_sizes(world: World, subject_id: str) -> dict:
    """Subject-specific region sizes: the world defaults jittered per subject."""
    cfg = world.config
    r = RngStream(cfg.seed, f"anatomy/{subject_id}")
    jit = r.uniform(len(REGIONS), -cfg.size_jitter, cfg.size_jitter)
    return {name: max(1, int(round(cfg.roi_sizes[name] * (1 + j))))
            for name, j in zip(REGIONS, jit)}


def _region_weights(world: World, name: str, n: int, rng: RngStream):
    """Per-voxel code and residual loadings, scaled to unit signal variance.

    The structural coefficient loads only on the block-constant residual, the
    semantic one only on the code.
    """
    fz = world.frozen
    ws, wc = world.config.coding[name]
    A = rng.normal((n, fz.latent.size))
    B = rng.normal((n, fz.code_dim))
    w_code = wc * B
    A_img = A.reshape((n,) + fz.latent.dims)
    w_res = ws * nc.upsample_nearest_backward(A_img, fz.latent.factor).reshape(n, -1)
    var = np.sum(w_code ** 2, 1) + world.config.structure_var * np.sum(w_res ** 2, 1)
    scale = np.where(var > 0, 1.0 / np.sqrt(np.maximum(var, 1e-300)), 0.0)
    return w_code * scale[:, None], w_res * scale[:, None]


def _stimulus_ids(world: World, subject_id: str, n_train: int, n_val: int) -> np.ndarray:
    base = (nc.stable_id(f"ids/{subject_id}") % 1_000_000 + 1) * 100_000
    return base + np.arange(n_train + n_val, dtype=np.int64)


def _template_sources(world, native_sizes, rng):
    """Native column for each template voxel (-1 = off-cortex) under a shared template."""
    cfg = world.config
    starts, s = {}, 0
    for name in REGIONS:
        starts[name] = s
        s += native_sizes[name]
    bands, sources = [], []
    for name in REGIONS:
        t, n = cfg.roi_sizes[name], native_sizes[name]
        # template resampled onto this anatomy: size mismatch duplicates or skips voxels
        src = starts[name] + np.minimum((np.arange(t) + 0.5) * n / t, n - 1).astype(np.int64)
        b = int(round(cfg.template_band * t / 2))
        band = np.r_[np.arange(b), np.arange(t - b, t)] if b else np.zeros(0, np.int64)
        off = band[rng.uniform(band.size) < cfg.template_offcortex]
        src[off] = -1
        sources.append(src)
        bands.append(np.setdiff1d(band, off))
    # permute boundary voxels between adjacent regions
    for k in range(len(REGIONS) - 1):
        left, right = bands[k], bands[k + 1]
        left = left[left >= cfg.roi_sizes[REGIONS[k]] // 2]
        right = right[right < cfg.roi_sizes[REGIONS[k + 1]] // 2]
        m = min(left.size, right.size)
        if not m:
            continue
        pick = rng.uniform(m) < cfg.template_swap
        li, ri = left[:m][pick], right[:m][pick]
        a, b = sources[k][li].copy(), sources[k + 1][ri].copy()
        sources[k][li], sources[k + 1][ri] = b, a
    return np.concatenate(sources)


def generate_subject(world: World, subject_id: str, n_train: int, n_val: int,
                     n_shared: int | None = None, roi_spec: dict | None = None,
                     rng: RngStream | None = None, mask_mode: str = "custom"):
    """Synthesize one subject's masked voxel responses and ROI mask."""
    cfg = world.config
    n_shared = cfg.n_shared if n_shared is None else n_shared
    if n_shared != cfg.n_shared:
        raise ConfigurationError(
            f"n_shared={n_shared} differs from the world's shared list ({cfg.n_shared})")
    if mask_mode not in ("custom", "template"):
        raise ConfigurationError(f"unknown mask mode {mask_mode!r}")
    sizes = dict(subject_sizes(world, subject_id) if roi_spec is None else roi_spec)
    for name in REGIONS:
        sizes.setdefault(name, 0)
        if roi_spec is not None and name in roi_spec and sizes[name] < 1:
            raise ConfigurationError(f"region {name} needs at least one voxel")
    rng = RngStream(cfg.seed, f"subject/{subject_id}") if rng is None else rng

    ids = np.concatenate([_stimulus_ids(world, subject_id, n_train, n_val), world.shared_ids])
    split = np.array(["train"] * n_train + ["val"] * n_val + ["shared_test"] * n_shared,
                     dtype=object)
    codes, latents, _ = world.stimuli(ids)
    resid = nc.upsample_nearest_backward(
        latents - (codes @ world.G.T).reshape(latents.shape), world.frozen.latent.factor
    ).reshape(len(ids), -1) / world.frozen.latent.factor ** 2

    cols = []
    for name in REGIONS:
        n = sizes[name]
        if n == 0:
            continue
        w_code, w_res = _region_weights(world, name, n, rng.child(f"weights/{name}"))
        signal = codes @ w_code.T + resid @ w_res.T
        snr = cfg.region_snr[name]
        noise_sd = 0.0 if math.isinf(snr) else 1.0 / snr
        cols.append(signal + noise_sd * rng.child(f"noise/{name}").normal(signal.shape))
    native = np.hstack(cols)

    if mask_mode == "custom":
        mask = RoiMask.contiguous(subject_id, sizes)
        voxels = native
    else:
        src = _template_sources(world, sizes, rng.child("template"))
        offc = rng.child("offcortex").normal((len(ids), src.size))
        voxels = np.where(src >= 0, native[:, np.maximum(src, 0)], offc)
        mask = RoiMask.contiguous(subject_id, cfg.roi_sizes)
    return SubjectDataset(subject_id, voxels, ids, split), mask


def save_subject(dataset: SubjectDataset, mask: RoiMask, root, world_hash: str = "") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    nstf_write(root / "voxels.nstf", dataset.voxels)
    manifest = {
        "format": "neuroswift-subject",
        "version": 1,
        "subject_id": dataset.subject_id,
        "world_hash": world_hash,
        "voxels": "voxels.nstf",
        "stimulus_ids": dataset.stimulus_ids.tolist(),
        "split": [str(s) for s in dataset.split],
        "mask": mask.to_dict(),
    }
    _write_json(root / "manifest.json", manifest)
    return root


def load_subject(root, world_hash: str | None = None):
    """Dataset and mask from disk; ``world_hash`` (if given) must match the recorded one."""
    root = Path(root)
    m = _read_json(root / "manifest.json")
    if m.get("format") != "neuroswift-subject":
        raise FormatError(f"{root}: not a subject manifest")
    if world_hash is not None and m.get("world_hash") and m["world_hash"] != world_hash:
        raise CompatibilityError(f"{root}: dataset was generated from a different world")
    mask = RoiMask.from_dict(m["mask"])
    ds = SubjectDataset(m["subject_id"], nstf_read(root / m["voxels"]), m["stimulus_ids"], m["split"])
    if ds.n_voxels != mask.total_voxels:
        raise FormatError(f"{root}: voxel width {ds.n_voxels} != mask {mask.total_voxels}")
    return ds, mask


def _write_json(path, obj):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise StorageError(f"missing {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
