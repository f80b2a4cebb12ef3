"""Default-config training runs shared by the slow test modules."""
import functools

from neuroswift import dataio as dio
from neuroswift import training as tr

SEEDS = (0, 1, 2)
N_TRAIN, N_VAL = 2000, 200


@functools.lru_cache(maxsize=None)
def default_run(seed: int, mask_mode: str = "custom", subject: str = "subj01"):
    """World, dataset, mask and default-trained checkpoint; cached for the session."""
    w = dio.generate_world(seed)
    ds, mask = dio.generate_subject(w, subject, N_TRAIN, N_VAL, mask_mode=mask_mode)
    ckpt = tr.pretrain(ds, w, tr.TrainConfig(seed=seed))
    return w, ds, mask, ckpt


@functools.lru_cache(maxsize=None)
def finetune_run(seed: int, subject: str = "subj02"):
    """Fine-tuned and equal-budget scratch checkpoints for a second subject."""
    w, _, _, base = default_run(seed)
    ds, mask = dio.generate_subject(w, subject, N_TRAIN, N_VAL)
    cfg = tr.TrainConfig(seed=seed)
    ft, report = tr.finetune_subject(base, ds, mask, w, cfg)
    scratch = tr.from_scratch(ds, w, cfg)
    return w, ds, mask, base, ft, report, scratch
