import datetime

import numpy as np
import pytest

import daystring
import ingest
import synth
from encoder import EncoderConfig


def ts(text: str) -> datetime.datetime:
    return ingest.parse_timestamp(text)


def event(pid: str, text: str, location: str) -> ingest.SensorEvent:
    return ingest.SensorEvent(pid, ts(text), location)


@pytest.fixture
def vocab():
    return daystring.Vocabulary.default()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return EncoderConfig(vocab_size=daystring.Vocabulary.default().size, d_model=8, n_layers=1, n_heads=2, d_ff=16)


@pytest.fixture(scope='session')
def small_cohort():
    config = synth.CohortConfig(n_participants=4, days=40, switch_probability=0.0, label_rate=0.2, seed=3)
    return synth.generate_cohort(config)


@pytest.fixture(scope='session')
def small_corpus(small_cohort):
    days = ingest.group_days(small_cohort.events)
    return daystring.build_corpus(days, daystring.Vocabulary.default(), seed=3)


@pytest.fixture(scope='session')
def two_regime_cohort():
    return synth.generate_cohort(synth.CohortConfig.two_regime(seed=11))


@pytest.fixture(scope='session')
def two_regime_corpus(two_regime_cohort):
    days = ingest.group_days(two_regime_cohort.events)
    return daystring.build_corpus(days, daystring.Vocabulary.default(), seed=11)
