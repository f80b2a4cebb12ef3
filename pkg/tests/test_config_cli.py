import json

import numpy as np
import pytest

from neuroswift import cli
from neuroswift import config as cf
from neuroswift import dataio as dio
from neuroswift import diffusion as df
from neuroswift import frozen as fr
from neuroswift import pipeline as pl
from neuroswift import training as tr
from neuroswift.errors import ConfigurationError, StorageError

SMALL = {
    "seed": 3,
    "world": {"n_shared": 12},
    "subjects": [{"id": "subjA", "n_train": 160, "n_val": 16}, {"id": "subjB", "n_train": 160, "n_val": 16}],
    "train": {"epochs": 3, "batch_size": 32, "hidden": 16, "blocks": 1},
    "evaluate": {"figures": False},
}


def _write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


# -------------------------------------------------------------------- config


def test_defaults_fill_everything():
    cfg = cf.parse_config({})
    assert [s.id for s in cfg.subjects] == ["subj01", "subj02"]
    assert cfg.world.seed == cfg.train.seed == 0
    assert cfg.reconstruct.s == 0.75 and cfg.modes == df.MODES
    assert cfg.budget_fraction == 0.125 and cfg.finetune_groups == ("fc_input", "head")
    assert cfg.train == tr.TrainConfig()


def test_master_seed_inherited():
    cfg = cf.parse_config({"seed": 9, "train": {"seed": 4}})
    assert cfg.world.seed == 9 and cfg.train.seed == 4 and cfg.reconstruct.seed == 9


@pytest.mark.parametrize("doc,path", [
    ({"world": {"colour": 1}}, "config.world"),
    ({"train": {"epochs": 0}}, "config.train.epochs"),
    ({"subjects": [{"n_train": 10}]}, "config.subjects[0]"),
    ({"reconstruct": {"mode": "full"}}, "config.reconstruct"),
    ({"typo": 1}, "config"),
])
def test_config_errors_name_key_path(doc, path):
    with pytest.raises(ConfigurationError) as info:
        cf.parse_config(doc)
    assert str(info.value).startswith(path)


def test_config_semantic_errors():
    with pytest.raises(ConfigurationError):
        cf.parse_config({"subjects": [{"id": "a"}, {"id": "a"}]})
    with pytest.raises(ConfigurationError):
        cf.parse_config({"reconstruct": {"beta_start": 0.3, "beta_end": 0.1}})
    with pytest.raises(ConfigurationError):
        cf.parse_config({}).subject("nobody")


def test_load_config_io(tmp_path):
    with pytest.raises(StorageError):
        cf.load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigurationError):
        cf.load_config(tmp_path / "bad.json")


def test_echo_is_resolved_document():
    cfg = cf.parse_config({"seed": 2})
    echo = cfg.echo()
    assert echo["seed"] == 2 and echo["train"]["epochs"] == 40
    cf.validate_document(echo)


def test_worker_count(monkeypatch):
    monkeypatch.delenv("NEUROSWIFT_THREADS", raising=False)
    assert pl.worker_count() == 1
    monkeypatch.setenv("NEUROSWIFT_THREADS", "3")
    assert pl.worker_count() == 3
    assert pl.ordered_map(lambda x: x * x, range(10)) == [x * x for x in range(10)]
    monkeypatch.setenv("NEUROSWIFT_THREADS", "zero")
    with pytest.raises(ConfigurationError):
        pl.worker_count()


# ---------------------------------------------------------------- exit codes


def test_exit_code_config(tmp_path, capsys):
    assert cli.main(["world", "--config", _write(tmp_path, {"world": {"latent_height": 0}})]) == 2
    assert "config.world.latent_height" in capsys.readouterr().err


def test_exit_code_io(tmp_path):
    assert cli.main(["world", "--config", str(tmp_path / "nope.json")]) == 3


def test_unknown_subject(tmp_path):
    cfg = _write(tmp_path, {**SMALL, "paths": {"root": str(tmp_path / "run")}})
    assert cli.main(["synth", "--config", cfg, "--subject", "subjZ"]) == 2


# ------------------------------------------------------------- stage by stage


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    """world -> synth -> train -> finetune through the CLI on a small config."""
    tmp = tmp_path_factory.mktemp("cli")
    root = tmp / "run"
    cfg = _write(tmp, {**SMALL, "paths": {"root": str(root)}})
    assert cli.main(["world", "--config", cfg]) == 0
    for s in ("subjA", "subjB"):
        assert cli.main(["synth", "--config", cfg, "--subject", s]) == 0
    assert cli.main(["train", "--config", cfg, "--subject", "subjA"]) == 0
    assert cli.main(["finetune", "--config", cfg, "--from", str(root / "checkpoints" / "subjA"),
                     "--subject", "subjB"]) == 0
    return tmp, root, cfg


def test_world_and_synth_idempotent(staged, tmp_path):
    _, root, cfg = staged
    assert cli.main(["world", "--config", cfg, "--out", str(tmp_path / "w")]) == 0
    assert (tmp_path / "w" / "manifest.json").read_bytes() == (root / "world" / "manifest.json").read_bytes()
    assert cli.main(["synth", "--config", cfg, "--subject", "subjA", "--out", str(tmp_path / "s")]) == 0
    for name in ("manifest.json", "voxels.nstf"):
        assert (tmp_path / "s" / name).read_bytes() == (root / "subjects" / "subjA" / name).read_bytes()
    assert (root / "world" / "config.json").exists()


def test_train_outputs(staged, tmp_path):
    _, root, cfg = staged
    ck_dir = root / "checkpoints" / "subjA"
    assert (ck_dir / "manifest.json").exists() and (ck_dir / "history.csv").exists()
    assert cli.main(["train", "--config", cfg, "--subject", "subjA", "--out", str(tmp_path / "again")]) == 0
    groups = ("fc_input", "core", "head", "norm")
    a, b = tr.load_checkpoint(ck_dir), tr.load_checkpoint(tmp_path / "again")
    assert tr.tensor_hash(a.adapters(), groups) == tr.tensor_hash(b.adapters(), groups)


def test_train_single_adapter(staged, tmp_path):
    _, root, cfg = staged
    assert cli.main(["train", "--config", cfg, "--subject", "subjA", "--adapter", "autokl",
                     "--out", str(tmp_path / "ak")]) == 0
    m = json.loads((tmp_path / "ak" / "manifest.json").read_text())
    assert m["meta"]["adapter_state"] == {"autokl": "trained", "clip": "init"}


def test_train_world_mismatch(staged, tmp_path):
    tmp, root, _ = staged
    other = _write(tmp_path, {**SMALL, "seed": 4, "paths": {"root": str(root)}})
    assert cli.main(["train", "--config", other, "--subject", "subjA"]) == 4


def test_finetune_report(staged):
    _, root, _ = staged
    rep = json.loads((root / "checkpoints" / "subjB" / "report.json").read_text())
    assert 0 < rep["trainable_fraction"] < 1
    census = rep["census"]
    assert rep["trainable_fraction"] == (census["fc_input"] + census["head"]) / census["total"]
    assert all(rep["frozen_hash_checks"])
    assert rep["n_train_used"] == int(0.125 * 160)


def test_finetune_budget_flag(staged, tmp_path):
    _, root, cfg = staged
    assert cli.main(["finetune", "--config", cfg, "--from", str(root / "checkpoints" / "subjA"),
                     "--subject", "subjB", "--budget-fraction", "0.5", "--out", str(tmp_path / "ft")]) == 0
    assert json.loads((tmp_path / "ft" / "report.json").read_text())["n_train_used"] == 80


def _recon(cfg, root, out, *extra):
    return cli.main(["reconstruct", "--config", cfg, "--checkpoint", str(root / "checkpoints" / "subjA"),
                     "--subject", "subjA", "--out", str(out), *extra])


def test_reconstruct_identity_path(staged, tmp_path):
    _, root, cfg = staged
    assert _recon(cfg, root, tmp_path / "oz", "--s", "1.0", "--mode", "only_z") == 0
    ids, images, m = pl.load_recon(tmp_path / "oz")
    world = dio.load_world(root / "world")
    ds, _ = dio.load_subject(root / "subjects" / "subjA", world.hash)
    ckpt = tr.load_checkpoint(root / "checkpoints" / "subjA")
    v, want_ids = ds.part("shared_test")
    assert np.array_equal(ids, want_ids)
    # reconstruction decodes trial by trial, so the oracle does too
    want = np.stack([fr.autokl_decode(world.frozen, z) for z in ckpt.autokl.forward(v)])
    assert images.tobytes() == want.tobytes()
    assert m["mode"] == "only_z" and len(list((tmp_path / "oz" / "images").glob("*.ppm"))) == len(ids)


def test_reconstruct_modes_and_determinism(staged, tmp_path):
    _, root, cfg = staged
    counts = set()
    for mode in df.MODES:
        assert _recon(cfg, root, tmp_path / mode, "--mode", mode, "--seed", "5") == 0
        counts.add(len(pl.load_recon(tmp_path / mode)[0]))
    assert len(counts) == 1
    assert _recon(cfg, root, tmp_path / "again", "--mode", "full", "--seed", "5") == 0
    assert pl.load_recon(tmp_path / "again")[1].tobytes() == pl.load_recon(tmp_path / "full")[1].tobytes()


def test_reconstruct_bad_strength(staged, tmp_path):
    _, root, cfg = staged
    assert _recon(cfg, root, tmp_path / "x", "--s", "1.5") == 2


def test_evaluate_ground_truth(staged, tmp_path, capsys):
    _, root, cfg = staged
    assert _recon(cfg, root, tmp_path / "r", "--mode", "only_z") == 0
    # swap the reconstructions for the stimulus images themselves
    world = dio.load_world(root / "world")
    ids, _, m = pl.load_recon(tmp_path / "r")
    _, _, gts = world.stimuli(ids)
    for t, img in zip(m["trials"], gts):
        dio.nstf_write(tmp_path / "r" / t["image"], img)
    assert cli.main(["evaluate", "--config", cfg, "--recon-dir", str(tmp_path / "r"),
                     "--out", str(tmp_path / "ev")]) == 0
    doc = json.loads((tmp_path / "ev" / "report.json").read_text())
    cf.validate_document(doc, "report")
    assert doc["metrics"]["pixcorr"] == 1.0 and doc["metrics"]["ssim"] == 1.0
    assert all(doc["metrics"][f"two_way_{e}"] == 100.0 for e in ("pixels", "random_projection", "frozen_clip"))
    assert "pixcorr" in capsys.readouterr().out


def test_evaluate_missing_dir(staged, tmp_path):
    _, _, cfg = staged
    assert cli.main(["evaluate", "--config", cfg, "--recon-dir", str(tmp_path / "none")]) == 3


def test_weights_map(staged, tmp_path):
    _, root, cfg = staged
    assert cli.main(["weights-map", "--config", cfg, "--checkpoint", str(root / "checkpoints" / "subjA"),
                     "--subject", "subjA", "--out", str(tmp_path / "wm")]) == 0
    mask = dio.load_subject(root / "subjects" / "subjA")[1]
    for kind in ("autokl", "clip"):
        rows = (tmp_path / "wm" / f"{kind}_contributions.csv").read_text().splitlines()
        assert len(rows) - 1 == mask.total_voxels


# ------------------------------------------------------------------ pipeline


def test_pipeline_end_to_end(tmp_path, capsys):
    doc = {**SMALL, "evaluate": {"figures": True}}
    cfg = _write(tmp_path, doc)
    assert cli.main(["pipeline", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    for mode in df.MODES:
        assert mode in out
    assert cli.main(["pipeline", "--config", cfg, "--out", str(tmp_path / "b"), "--no-figures"]) == 0
    a = (tmp_path / "a" / "summary.csv").read_text()
    assert a == (tmp_path / "b" / "summary.csv").read_text()
    modes = {line.split(",")[1] for line in a.splitlines()[1:]}
    assert modes == set(df.MODES)
    figs = sorted(p.name for p in (tmp_path / "a" / "figures").glob("*.png"))
    assert "ablation.png" in figs and "recon_grid_subjA.png" in figs and "loss_subjB.png" in figs
    assert not (tmp_path / "b" / "figures").exists()
    assert (tmp_path / "a" / "config.json").exists()
    ratios = json.loads((tmp_path / "a" / "interpretability.json").read_text())
    assert set(ratios) == {"subjA", "subjB"}
