"""Day-strings: one day of events reduced to a fixed number of modal-location tokens.

Each 20 minute window (aligned to midnight UTC) becomes the location recorded
most often inside it, "Nowhere" when nothing was recorded. Ties are broken by a
uniform draw from the tied locations, ordered by vocabulary id.
"""

import datetime
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from csv_helper import read_jsonl, write_jsonl
from errors import SequenceLengthError, VocabularyError
from ingest import NOWHERE, SENSOR_LOCATIONS, DayRecord
from settings import derive_seed

logger = logging.getLogger(__name__)

PAD = '[PAD]'
WINDOW_MINUTES = 20
MINUTES_PER_DAY = 24 * 60
MAX_TOKENS = 255


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("vocabulary tokens must be unique")
        if PAD in self.tokens:
            raise VocabularyError(f"{PAD} is reserved")
        if NOWHERE not in self.tokens:
            raise VocabularyError(f"vocabulary must contain {NOWHERE!r}")
        object.__setattr__(self, '_ids', {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def default(cls) -> 'Vocabulary':
        return cls(SENSOR_LOCATIONS + (NOWHERE,))

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> 'Vocabulary':
        tokens = tuple(tokens)
        if NOWHERE not in tokens:
            tokens = tokens + (NOWHERE,)
        return cls(tokens)

    @property
    def pad_id(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        """Number of ids including PAD."""
        return len(self.tokens) + 1

    def __contains__(self, token) -> bool:
        return token in self._ids

    def __iter__(self):
        return iter(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}")


@dataclass(frozen=True)
class TokenSequence:
    participant_id: str
    date: datetime.date
    tokens: Tuple[str, ...]
    window_minutes: int = WINDOW_MINUTES

    def __post_init__(self):
        expected = windows_per_day(self.window_minutes)
        if len(self.tokens) != expected:
            raise SequenceLengthError(f"expected {expected} tokens, got {len(self.tokens)}")


@dataclass(frozen=True)
class DayString:
    text: str

    def words(self) -> List[str]:
        return self.text.split()


@dataclass(frozen=True)
class DayStringRecord:
    participant_id: str
    date: datetime.date
    text: str

    @property
    def key(self) -> Tuple[str, datetime.date]:
        return self.participant_id, self.date

    def to_dict(self):
        return {"participant_id": self.participant_id, "date": self.date.isoformat(), "text": self.text}


def windows_per_day(window_minutes: int) -> int:
    if window_minutes <= 0 or MINUTES_PER_DAY % window_minutes:
        raise SequenceLengthError(f"window_minutes must divide {MINUTES_PER_DAY}, got {window_minutes}")
    return MINUTES_PER_DAY // window_minutes


def day_seed(seed: int, participant_id: str, date: datetime.date) -> int:
    return derive_seed(seed, 'daystring', f"{participant_id}|{date.isoformat()}")


def aggregate_day(day: DayRecord, vocab: Vocabulary, rng: np.random.Generator,
                  window_minutes: int = WINDOW_MINUTES) -> TokenSequence:
    n_windows = windows_per_day(window_minutes)
    counts = [Counter() for _ in range(n_windows)]
    for i, event in enumerate(day.events):
        if event.location not in vocab:
            raise VocabularyError(
                f"event {i} of {day.participant_id} on {day.date.isoformat()} "
                f"has unknown location {event.location!r}")
        minute = event.timestamp.hour * 60 + event.timestamp.minute
        counts[minute // window_minutes][event.location] += 1

    tokens = []
    for window in counts:
        if not window:
            tokens.append(NOWHERE)
            continue
        top = max(window.values())
        tied = sorted((loc for loc, c in window.items() if c == top), key=vocab.id_of)
        if len(tied) == 1:
            tokens.append(tied[0])
        else:
            tokens.append(tied[int(rng.integers(len(tied)))])
    return TokenSequence(day.participant_id, day.date, tuple(tokens), window_minutes)


def render_string(seq: TokenSequence) -> DayString:
    return DayString(' '.join(seq.tokens))


def tokenize(s: Union[DayString, str], vocab: Vocabulary, max_tokens: int = MAX_TOKENS) -> List[int]:
    words = s.words() if isinstance(s, DayString) else s.split()
    if len(words) > max_tokens:
        raise SequenceLengthError(f"sequence of {len(words)} tokens exceeds the limit of {max_tokens}")
    return [vocab.id_of(w) for w in words]


def build_corpus(days: Sequence[DayRecord], vocab: Vocabulary, seed: int,
                 window_minutes: int = WINDOW_MINUTES) -> List[DayStringRecord]:
    corpus = []
    for day in days:
        rng = np.random.default_rng(day_seed(seed, day.participant_id, day.date))
        seq = aggregate_day(day, vocab, rng, window_minutes)
        corpus.append(DayStringRecord(day.participant_id, day.date, render_string(seq).text))
    logger.info(f"Built {len(corpus)} day-strings")
    return corpus


def write_corpus(path, corpus: Iterable[DayStringRecord]):
    write_jsonl(path, (record.to_dict() for record in corpus))


def read_corpus(path, vocab: Optional[Vocabulary] = None) -> List[DayStringRecord]:
    corpus = []
    for i, row in enumerate(read_jsonl(path), start=1):
        try:
            record = DayStringRecord(str(row['participant_id']),
                                     datetime.date.fromisoformat(row['date']), row['text'])
        except (KeyError, ValueError) as e:
            raise VocabularyError(f"corpus line {i}: bad record ({e})")
        if vocab is not None:
            tokenize(record.text, vocab)
        corpus.append(record)
    return corpus
