import numpy as np
import pytest

from longisurv.model import ModelConfig, SequenceBatch, init_params
from longisurv.survival import EventOutcome


def tiny_config(kind="longitudinal", **over):
    base = dict(kind=kind, embed_dim=16, n_layers=2, n_heads=2, dropout=0.25,
                j_max=9, step_months=6, image_size=16, image_channels=1,
                conv_widths=(4, 8, 8))
    base.update(over)
    return ModelConfig(**base)


def random_batch(rng, cfg, lengths, l_pad=None):
    """Build a valid SequenceBatch with the given per-eye visit counts."""
    b = len(lengths)
    l = l_pad or max(lengths)
    images = np.zeros((b, l, cfg.image_channels, cfg.image_size, cfg.image_size))
    months = np.zeros((b, l))
    valid = np.zeros((b, l), dtype=bool)
    outcomes = []
    for i, j_i in enumerate(lengths):
        images[i, :j_i] = rng.uniform(0, 1, (j_i, cfg.image_channels,
                                             cfg.image_size, cfg.image_size))
        months[i, :j_i] = np.arange(j_i) * cfg.step_months
        valid[i, :j_i] = True
        outcomes.append(EventOutcome(int(rng.integers(1, cfg.j_max + 1)),
                                     bool(rng.random() < 0.8)))
    return SequenceBatch(images=images, visit_months=months, valid=valid,
                         outcomes=outcomes)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def small_model(rng):
    cfg = tiny_config()
    return cfg, init_params(cfg, seed=3)
