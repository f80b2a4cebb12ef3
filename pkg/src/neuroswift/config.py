"""Run configuration: JSON document validated against the shipped schema, then filled with defaults."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .dataio import WorldConfig
from .diffusion import ReconstructionConfig
from .errors import ConfigurationError, StorageError
from .training import TrainConfig


def load_schema(name: str = "config") -> dict:
    text = resources.files("neuroswift").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def _key_path(err) -> str:
    parts = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    return "config" + parts


def validate_document(doc, schema_name: str = "config"):
    schema = load_schema(schema_name)
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigurationError(f"{_key_path(err)}: {err.message}")


def _fill(node: dict, schema: dict, root: dict):
    """Insert schema defaults for every absent property, recursively."""
    if "$ref" in schema:
        schema = {**root["$defs"][schema["$ref"].rsplit("/", 1)[-1]], **schema}
    if isinstance(node, dict):
        for key, sub in schema.get("properties", {}).items():
            if key not in node and "default" in sub:
                node[key] = copy.deepcopy(sub["default"])
            if key in node:
                _fill(node[key], sub, root)
    elif isinstance(node, list) and "items" in schema:
        for item in node:
            _fill(item, schema["items"], root)


@dataclass
class SubjectSpec:
    id: str
    n_train: int = 2000
    n_val: int = 200
    mask_mode: str = "custom"
    roi_sizes: dict | None = None


@dataclass
class RunConfig:
    seed: int
    world: WorldConfig
    subjects: list
    train: TrainConfig
    budget_fraction: float
    finetune_groups: tuple
    reconstruct: ReconstructionConfig
    modes: tuple
    split: str
    extractors: tuple
    projection_dim: int
    figures: bool
    root: Path
    document: dict = field(default_factory=dict)

    def subject(self, subject_id: str) -> SubjectSpec:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise ConfigurationError(f"subject {subject_id!r} not in config "
                                 f"(known: {[s.id for s in self.subjects]})")

    def recon_config(self, mode: str) -> ReconstructionConfig:
        return ReconstructionConfig(**{**asdict(self.reconstruct), "mode": mode}).validate()

    def echo(self) -> dict:
        """Fully resolved document (defaults filled) for provenance files."""
        return copy.deepcopy(self.document)


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("config: top level must be a JSON object")
    validate_document(doc)
    doc = copy.deepcopy(doc)
    schema = load_schema()
    _fill(doc, schema, schema)
    seed = doc["seed"]
    ids = [s["id"] for s in doc["subjects"]]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("config.subjects: duplicate subject ids")

    w = dict(doc["world"])
    w["seed"] = seed if w["seed"] is None else w["seed"]
    world = WorldConfig.from_dict(w)
    t = dict(doc["train"])
    t["seed"] = seed if t["seed"] is None else t["seed"]
    train = TrainConfig.from_dict(t)
    r = dict(doc["reconstruct"])
    modes, split = tuple(r.pop("modes")), r.pop("split")
    if r["beta_start"] > r["beta_end"]:
        raise ConfigurationError("config.reconstruct: beta_start exceeds beta_end")
    recon = ReconstructionConfig(seed=seed, **r).validate()
    ev = doc["evaluate"]
    return RunConfig(
        seed=seed, world=world, subjects=[SubjectSpec(**s) for s in doc["subjects"]],
        train=train, budget_fraction=doc["finetune"]["budget_fraction"],
        finetune_groups=tuple(doc["finetune"]["groups"]), reconstruct=recon, modes=modes,
        split=split, extractors=tuple(ev["extractors"]), projection_dim=ev["projection_dim"],
        figures=ev["figures"], root=Path(doc["paths"]["root"]), document=doc,
    )


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise StorageError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc)
