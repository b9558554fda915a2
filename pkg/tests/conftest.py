import numpy as np
import pytest

from modaladapt.data import SyntheticTaskSpec, Utterance, synthesize
from modaladapt.model import ModelConfig, build_model


def tiny_config(**kw):
    """Small model for gradient checks: hidden 8, embedding 4, 12-tap conv."""
    base = dict(hidden_width=8, embedding_dim=4, conv_width=12, conv_stride=4, conv_filters=3)
    base.update(kw)
    return ModelConfig(5, 4, **base)


def tiny_utterance(rng, frames=6, cfg=None, speaker="spk00"):
    cfg = cfg or tiny_config()
    return Utterance(
        id=f"{speaker}_train_0000",
        speaker=speaker,
        split="train",
        ling=rng.normal(size=(frames, cfg.linguistic_dim)),
        acoustic=rng.normal(size=(frames, cfg.acoustic_dim)),
        wave=rng.uniform(-1, 1, size=frames * cfg.conv_stride),
    )


SMALL_SPEC = dict(num_train_speakers=3, num_adapt_speakers=1, utterances_per_speaker=6,
                  valid_per_speaker=2, test_per_speaker=2, adapt_pool_size=12,
                  min_frames=8, max_frames=12)


def small_spec(seed=0, **kw):
    return SyntheticTaskSpec(seed=seed, **{**SMALL_SPEC, **kw})


def small_model_config(vanilla=False):
    if vanilla:
        return ModelConfig.vanilla(30, 26, hidden_width=12, embedding_dim=4)
    return ModelConfig(30, 26, hidden_width=12, embedding_dim=4)


@pytest.fixture(scope="session")
def small_corpus():
    return synthesize(small_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), 2, seed=3)
