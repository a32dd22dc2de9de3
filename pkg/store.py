"""Embedding store: one vector per (participant_id, date).

Persisted as JSON-lines ``{"participant_id", "date", "vector": [...]}``.
Immutable after construction; all lookups are read-only.
"""

import datetime
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Tuple

import numpy as np

from csv_helper import read_jsonl, write_jsonl
from errors import AnalyticsError

logger = logging.getLogger(__name__)

Key = Tuple[str, datetime.date]


class EmbeddingStore:
    def __init__(self, keys: List[Key], vectors: np.ndarray):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(keys):
            raise AnalyticsError("vectors must be an (n, d) matrix with one row per key")
        self._keys = list(keys)
        self._vectors = vectors
        self._vectors.setflags(write=False)
        self._row: Dict[Key, int] = {}
        self._by_participant: Dict[str, List[int]] = defaultdict(list)
        self._by_date: Dict[datetime.date, List[int]] = defaultdict(list)
        for i, key in enumerate(self._keys):
            if key in self._row:
                raise AnalyticsError(f"duplicate embedding for {key[0]} on {key[1].isoformat()}")
            self._row[key] = i
            self._by_participant[key[0]].append(i)
            self._by_date[key[1]].append(i)
        for rows in self._by_participant.values():
            rows.sort(key=lambda r: self._keys[r][1])

    @classmethod
    def from_records(cls, records: Iterable[Tuple[str, datetime.date, Iterable[float]]]) -> 'EmbeddingStore':
        keys, rows = [], []
        for pid, date, vector in records:
            keys.append((pid, date))
            rows.append(np.asarray(vector, dtype=np.float64))
        if rows and len({r.shape for r in rows}) != 1:
            raise AnalyticsError("all vectors must have the same dimension")
        vectors = np.vstack(rows) if rows else np.zeros((0, 0))
        return cls(keys, vectors)

    def __len__(self):
        return len(self._keys)

    def __contains__(self, key) -> bool:
        return key in self._row

    @property
    def keys(self) -> List[Key]:
        return list(self._keys)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    @property
    def participants(self) -> List[str]:
        return sorted(self._by_participant)

    def vector(self, participant_id: str, date: datetime.date) -> np.ndarray:
        try:
            return self._vectors[self._row[(participant_id, date)]]
        except KeyError:
            raise AnalyticsError(f"no embedding for {participant_id} on {date.isoformat()}")

    def row_of(self, key: Key) -> int:
        try:
            return self._row[key]
        except KeyError:
            raise AnalyticsError(f"no embedding for {key[0]} on {key[1].isoformat()}")

    def participant_rows(self, participant_id: str) -> List[int]:
        """Rows of one participant, ordered by date."""
        if participant_id not in self._by_participant:
            raise AnalyticsError(f"unknown participant {participant_id!r}")
        return list(self._by_participant[participant_id])

    def date_rows(self, date: datetime.date) -> List[int]:
        return list(self._by_date.get(date, []))

    def to_records(self):
        for (pid, date), vector in zip(self._keys, self._vectors):
            yield {"participant_id": pid, "date": date.isoformat(), "vector": [float(x) for x in vector]}


def save_store(store: EmbeddingStore, path):
    write_jsonl(path, store.to_records())
    logger.info(f"Wrote {len(store)} embeddings to {path}")


def load_store(path) -> EmbeddingStore:
    rows = read_jsonl(path)
    try:
        return EmbeddingStore.from_records(
            (str(r["participant_id"]), datetime.date.fromisoformat(r["date"]), r["vector"]) for r in rows)
    except (KeyError, ValueError) as e:
        raise AnalyticsError(f"{path}: malformed embedding record ({e})")
