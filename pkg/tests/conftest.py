import numpy as np
import pytest
import torch

import talkmotion as tm


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small, fast corpus for unit tests: 2 speakers x 3 utterances."""
    config = tm.SynthesisConfig(speakers=2, utterances_per_speaker=3,
                                frames_range=(30, 44), seed=7)
    return tm.generate_synthetic_corpus(config)


@pytest.fixture(scope="session")
def tiny_prior(tiny_corpus):
    """A briefly trained prior over the tiny corpus."""
    config = tm.PriorConfig(vertex_count=tiny_corpus.rig.vertex_count,
                            num_codes=32, code_dim=16, components=4,
                            width=48, feedforward=96, heads=2, layers=1,
                            epochs=2, seed=0)
    model, _ = tm.train_prior(tiny_corpus, config)
    return model


@pytest.fixture(scope="session")
def tiny_synth(tiny_corpus, tiny_prior):
    """A briefly trained stage-two model matching tiny_prior."""
    config = tm.SynthConfig(
        num_styles=tiny_corpus.speakers, width=48, feedforward=96, heads=2,
        layers=1, epochs=2, seed=0,
        speech=tm.SpeechEncoderConfig(channels=16, width=32, feedforward=64,
                                      heads=2, layers=1, out_dim=48))
    model, _ = tm.train_synth(tiny_corpus, tiny_prior, config)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
