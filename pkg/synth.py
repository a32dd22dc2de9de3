"""Synthetic cohorts with planted daily-routine regimes.

Each participant follows one regime template (optionally switching once mid
series) blended with a small participant-specific routine so participants stay
distinguishable. Every 20-minute window the participant is in one location
drawn from the template's 2-hour block distribution and trips a Poisson number
of sensor events there. Positive labelled days have more night-time bathroom
visits.

Outputs are the event and label CSVs read by ``ingest`` plus a JSON-lines
ground-truth manifest (participant, date, regime, label).
"""

import datetime
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from csv_helper import write_csv, write_jsonl
from daystring import WINDOW_MINUTES
from errors import ConfigError
from ingest import (EVENT_HEADER, LABEL_HEADER, NEGATIVE, POSITIVE, SENSOR_LOCATIONS, Label, LabelSet,
                    SensorEvent)
from settings import derive_seed

logger = logging.getLogger(__name__)

BLOCK_MINUTES = 120
N_BLOCKS = 24 * 60 // BLOCK_MINUTES
NIGHT_BLOCKS = (0, 1, 2)  # 00:00 - 06:00
START_DATE = datetime.date(2021, 1, 1)
COHORT_FILES = ('events.csv', 'labels.csv', 'ground_truth.jsonl')

_LOC = {name: i for i, name in enumerate(SENSOR_LOCATIONS)}

# Early riser: asleep at night, kitchen in the morning, lounge in the afternoon.
_EARLY_RISER = {
    (0, 3): {'Bed': .85, 'Bedroom': .1, 'Bathroom': .05},
    (3, 4): {'Bathroom': .3, 'Kitchen': .4, 'Hallway': .3},
    (4, 6): {'Lounge': .6, 'Kitchen': .2, 'Hallway': .2},
    (6, 7): {'Kitchen': .6, 'Lounge': .4},
    (7, 9): {'Lounge': .7, 'Hallway': .2, 'Bathroom': .1},
    (9, 10): {'Kitchen': .5, 'Lounge': .5},
    (10, 11): {'Lounge': .6, 'Bathroom': .2, 'Bedroom': .2},
    (11, 12): {'Bed': .7, 'Bedroom': .3},
}

# Night owl: up in the small hours, sleeping through the morning.
_NIGHT_OWL = {
    (0, 2): {'Lounge': .6, 'Kitchen': .2, 'Hallway': .2},
    (2, 3): {'Bedroom': .5, 'Bed': .4, 'Bathroom': .1},
    (3, 5): {'Bed': .9, 'Bedroom': .1},
    (5, 6): {'Bathroom': .3, 'Bedroom': .3, 'Hallway': .4},
    (6, 8): {'Kitchen': .5, 'Hallway': .3, 'Lounge': .2},
    (8, 10): {'Hallway': .4, 'Lounge': .3, 'Kitchen': .3},
    (10, 12): {'Lounge': .5, 'Kitchen': .4, 'Bathroom': .1},
}


@dataclass(frozen=True)
class RegimeTemplate:
    id: int
    blocks: np.ndarray  # (N_BLOCKS, len(SENSOR_LOCATIONS)), rows sum to 1
    event_rate: float = 3.0

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=np.float64)
        if blocks.shape != (N_BLOCKS, len(SENSOR_LOCATIONS)):
            raise ConfigError(f"regime {self.id}: blocks must have shape {(N_BLOCKS, len(SENSOR_LOCATIONS))}")
        if np.any(blocks < 0) or not np.allclose(blocks.sum(axis=1), 1.0):
            raise ConfigError(f"regime {self.id}: block distributions must be non-negative and sum to 1")
        if self.event_rate <= 0:
            raise ConfigError(f"regime {self.id}: event_rate must be positive")
        object.__setattr__(self, 'blocks', blocks)


@dataclass(frozen=True)
class CohortConfig:
    n_participants: int = 30
    days: int = 120
    n_regimes: int = 2
    switch_probability: float = 0.1
    label_rate: float = 0.05
    night_bathroom_factor: float = 3.0
    participant_jitter: float = 0.15
    event_rate: float = 3.0
    days_distribution: str = 'fixed'  # or 'lognormal'
    days_median: int = 513
    days_min: int = 5
    days_max: int = 943
    days_sigma: float = 0.25
    target_total_days: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_participants < 2:
            raise ConfigError("n_participants must be >= 2")
        if self.days < 2 or self.days_min < 2:
            raise ConfigError("participants need at least 2 days")
        if not self.days_min <= self.days_median <= self.days_max:
            raise ConfigError("days_min <= days_median <= days_max must hold")
        if self.n_regimes < 1:
            raise ConfigError("n_regimes must be >= 1")
        for name in ('switch_probability', 'label_rate', 'participant_jitter'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.night_bathroom_factor <= 0 or self.event_rate <= 0:
            raise ConfigError("night_bathroom_factor and event_rate must be positive")
        if self.days_distribution not in ('fixed', 'lognormal'):
            raise ConfigError(f"unknown days_distribution {self.days_distribution!r}")

    @classmethod
    def two_regime(cls, seed: int = 0) -> 'CohortConfig':
        return cls(n_participants=30, days=120, n_regimes=2, switch_probability=0.0, seed=seed)

    @classmethod
    def paper_scale(cls, seed: int = 0) -> 'CohortConfig':
        return cls(n_participants=134, days_distribution='lognormal', days_median=513, days_min=5,
                   days_max=943, target_total_days=65962, seed=seed)

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True)
class GroundTruthDay:
    participant_id: str
    date: datetime.date
    regime: int
    label: Optional[str] = None

    def to_dict(self):
        return {"participant_id": self.participant_id, "date": self.date.isoformat(),
                "regime": self.regime, "label": self.label}


@dataclass
class Cohort:
    config: CohortConfig
    regimes: List[RegimeTemplate]
    events: List[SensorEvent] = field(default_factory=list)
    labels: LabelSet = field(default_factory=LabelSet)
    ground_truth: List[GroundTruthDay] = field(default_factory=list)

    def regime_of(self) -> Dict[Tuple[str, datetime.date], int]:
        return {(g.participant_id, g.date): g.regime for g in self.ground_truth}


# ----------------------------------------------------------------------------
# Templates
# ----------------------------------------------------------------------------
def _blocks_from(routine: Dict[Tuple[int, int], Dict[str, float]]) -> np.ndarray:
    blocks = np.zeros((N_BLOCKS, len(SENSOR_LOCATIONS)))
    for (start, stop), weights in routine.items():
        for name, w in weights.items():
            blocks[start:stop, _LOC[name]] = w
    return blocks / blocks.sum(axis=1, keepdims=True)


def make_regimes(n_regimes: int, seed: int = 0, event_rate: float = 3.0) -> List[RegimeTemplate]:
    """Two hand-written routines, then random block distributions."""
    regimes = []
    for r in range(n_regimes):
        if r == 0:
            blocks = _blocks_from(_EARLY_RISER)
        elif r == 1:
            blocks = _blocks_from(_NIGHT_OWL)
        else:
            rng = np.random.default_rng(derive_seed(seed, 'synth', f'regime{r}'))
            blocks = rng.dirichlet(np.full(len(SENSOR_LOCATIONS), 0.5), size=N_BLOCKS)
        regimes.append(RegimeTemplate(r, blocks, event_rate))
    return regimes


def perturb_night_bathroom(blocks: np.ndarray, factor: float) -> np.ndarray:
    out = blocks.copy()
    for b in NIGHT_BLOCKS:
        out[b, _LOC['Bathroom']] = max(out[b, _LOC['Bathroom']], 0.02) * factor
        out[b] /= out[b].sum()
    return out


# ----------------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------------
def participant_ids(n: int) -> List[str]:
    return [f"p{i + 1}" for i in range(n)]


def participant_day_counts(config: CohortConfig) -> List[int]:
    n = config.n_participants
    if config.days_distribution == 'fixed':
        return [config.days] * n
    rng = np.random.default_rng(derive_seed(config.seed, 'synth', 'days'))
    raw = rng.lognormal(np.log(config.days_median), config.days_sigma, size=n)
    if config.target_total_days:
        raw = raw * config.target_total_days / raw.sum()
    counts = np.clip(np.rint(raw), config.days_min, config.days_max).astype(int)
    return [int(c) for c in counts]


def _simulate_day(pid: str, date: datetime.date, blocks: np.ndarray, rate: float,
                  rng: np.random.Generator) -> List[SensorEvent]:
    n_windows = 24 * 60 // WINDOW_MINUTES
    per_block = BLOCK_MINUTES // WINDOW_MINUTES
    cdf = np.cumsum(blocks, axis=1)
    window_cdf = np.repeat(cdf, per_block, axis=0)
    u = rng.random(n_windows)
    places = np.minimum((window_cdf < u[:, None]).sum(axis=1), len(SENSOR_LOCATIONS) - 1)
    counts = rng.poisson(rate, size=n_windows)
    midnight = datetime.datetime(date.year, date.month, date.day, tzinfo=datetime.timezone.utc)
    events = []
    for w in np.flatnonzero(counts):
        offsets = np.sort(rng.choice(WINDOW_MINUTES * 60, size=counts[w], replace=False))
        location = SENSOR_LOCATIONS[places[w]]
        start = w * WINDOW_MINUTES * 60
        for s in offsets:
            events.append(SensorEvent(pid, midnight + datetime.timedelta(seconds=int(start + s)), location))
    return events


def _simulate_participant(config: CohortConfig, regimes: List[RegimeTemplate], pid: str, n_days: int):
    rng = np.random.default_rng(derive_seed(config.seed, 'synth', pid))
    regime = int(rng.integers(len(regimes)))
    switch_day = None
    if len(regimes) > 1 and rng.random() < config.switch_probability:
        switch_day = int(rng.integers(n_days // 3, max(n_days // 3 + 1, 2 * n_days // 3)))
        later = int(rng.integers(len(regimes) - 1))
        later_regime = later if later < regime else later + 1
    identity = rng.dirichlet(np.ones(len(SENSOR_LOCATIONS)), size=N_BLOCKS)
    start = START_DATE + datetime.timedelta(days=int(rng.integers(0, 365)))

    events, labels, truth = [], [], []
    for d in range(n_days):
        date = start + datetime.timedelta(days=d)
        current = later_regime if switch_day is not None and d >= switch_day else regime
        template = regimes[current]
        blocks = (1 - config.participant_jitter) * template.blocks + config.participant_jitter * identity
        label = None
        if rng.random() < config.label_rate:
            label = POSITIVE if rng.random() < 0.5 else NEGATIVE
            if label == POSITIVE:
                blocks = perturb_night_bathroom(blocks, config.night_bathroom_factor)
            labels.append(Label(pid, date, label))
        events.extend(_simulate_day(pid, date, blocks, template.event_rate, rng))
        truth.append(GroundTruthDay(pid, date, current, label))
    return events, labels, truth


def generate_cohort(config: CohortConfig, regimes: Optional[List[RegimeTemplate]] = None) -> Cohort:
    """Generate a cohort; each participant draws from its own derived sub-seed."""
    regimes = regimes or make_regimes(config.n_regimes, config.seed, config.event_rate)
    cohort = Cohort(config, regimes)
    labels = []
    for pid, n_days in zip(participant_ids(config.n_participants), participant_day_counts(config)):
        events, day_labels, truth = _simulate_participant(config, regimes, pid, n_days)
        cohort.events.extend(events)
        labels.extend(day_labels)
        cohort.ground_truth.extend(truth)
    cohort.events.sort()
    cohort.ground_truth.sort(key=lambda g: (g.participant_id, g.date))
    cohort.labels = LabelSet(tuple(sorted(labels, key=lambda l: (l.participant_id, l.date))))
    logger.info(f"Generated {config.n_participants} participants, {len(cohort.ground_truth)} days, "
                f"{len(cohort.events)} events, {len(cohort.labels)} labels")
    return cohort


def write_cohort(cohort: Cohort, out_dir) -> Dict[str, str]:
    paths = {name: os.path.join(out_dir, name) for name in COHORT_FILES}
    write_csv(paths['events.csv'], (e.to_dict() for e in cohort.events), list(EVENT_HEADER))
    write_csv(paths['labels.csv'],
              ({"participant_id": l.participant_id, "date": l.date.isoformat(), "label": l.polarity}
               for l in cohort.labels.entries),
              list(LABEL_HEADER))
    write_jsonl(paths['ground_truth.jsonl'], (g.to_dict() for g in cohort.ground_truth))
    return paths
