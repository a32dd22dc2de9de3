"""Queries over an EmbeddingStore: cosine search, per-participant similarity
matrices, label similarity and cluster proportions over time."""

import datetime
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from csv_helper import ensure_parent, write_csv
from errors import AnalyticsError
from ingest import POSITIVE, LabelSet
from store import EmbeddingStore

logger = logging.getLogger(__name__)

Key = Tuple[str, datetime.date]

TOP_K = 9
STRIDE = 20
SAMPLE_SIZE = 8
JOURNEY_PARTICIPANTS = 25


@dataclass(frozen=True)
class SearchHit:
    rank: int
    participant_id: str
    date: datetime.date
    similarity: float

    def to_dict(self):
        return {
            "rank": self.rank,
            "participant_id": self.participant_id,
            "date": self.date.isoformat(),
            "similarity": repr(float(self.similarity)),
        }


@dataclass
class SimilarityMatrix:
    participant_id: str
    dates: List[datetime.date]
    matrix: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        labels = [d.isoformat() for d in self.dates]
        return pd.DataFrame(self.matrix, index=pd.Index(labels, name="date"), columns=labels)


@dataclass
class ParticipantLabelSimilarity:
    participant_id: str
    n_positive: int
    n_negative: int
    pos_pos: float
    pos_neg: float


@dataclass
class LabelSimilarityReport:
    participants: List[ParticipantLabelSimilarity] = field(default_factory=list)
    pos_pos_mean: Optional[float] = None
    pos_pos_std: Optional[float] = None
    pos_neg_mean: Optional[float] = None
    pos_neg_std: Optional[float] = None
    n_positive: int = 0
    n_negative: int = 0

    @property
    def n_participants(self) -> int:
        return len(self.participants)

    def to_dict(self):
        return {
            "participants": self.n_participants,
            "positive_days": self.n_positive,
            "negative_days": self.n_negative,
            "pos_pos_mean": self.pos_pos_mean,
            "pos_pos_std": self.pos_pos_std,
            "pos_neg_mean": self.pos_neg_mean,
            "pos_neg_std": self.pos_neg_std,
        }


# ----------------------------------------------------------------------------
# Cosine similarity and search
# ----------------------------------------------------------------------------
def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise AnalyticsError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise AnalyticsError("store contains a zero vector")
    return vectors / norms[:, None]


def search(store: EmbeddingStore, query: Union[Key, Sequence[float], np.ndarray], top_k: int = TOP_K,
           exclude_self: bool = True) -> List[SearchHit]:
    """Exhaustive cosine search.

    Results are ordered by similarity, descending, then by (participant_id, date).
    """
    if len(store) == 0:
        raise AnalyticsError("cannot search an empty store")
    if top_k < 1:
        raise AnalyticsError(f"top_k must be >= 1, got {top_k}")
    self_row = None
    if isinstance(query, tuple) and len(query) == 2 and isinstance(query[1], datetime.date):
        self_row = store.row_of(query)
        q = store.vectors[self_row]
    else:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (store.dim,):
            raise AnalyticsError(f"query vector has shape {q.shape}, expected ({store.dim},)")
    qn = np.linalg.norm(q)
    if qn == 0:
        raise AnalyticsError("query vector is zero")
    sims = np.clip(_unit_rows(store.vectors) @ (q / qn), -1.0, 1.0)

    keys = store.keys
    rows = [i for i in range(len(keys)) if not (exclude_self and i == self_row)]
    rows.sort(key=lambda i: (-sims[i], keys[i][0], keys[i][1]))
    return [SearchHit(rank, keys[i][0], keys[i][1], float(sims[i]))
            for rank, i in enumerate(rows[:top_k], start=1)]


def participant_similarity_matrix(store: EmbeddingStore, participant_id: str,
                                  stride: int = STRIDE) -> SimilarityMatrix:
    if stride < 1:
        raise AnalyticsError(f"stride must be >= 1, got {stride}")
    rows = store.participant_rows(participant_id)[::stride]
    if len(rows) < 2:
        raise AnalyticsError(f"participant {participant_id!r} has fewer than 2 days at stride {stride}")
    unit = _unit_rows(store.vectors[rows])
    matrix = np.clip(unit @ unit.T, -1.0, 1.0)
    matrix = (matrix + matrix.T) / 2
    keys = store.keys
    return SimilarityMatrix(participant_id, [keys[r][1] for r in rows], matrix)


# ----------------------------------------------------------------------------
# Label similarity
# ----------------------------------------------------------------------------
def label_similarity(store: EmbeddingStore, labels: LabelSet) -> LabelSimilarityReport:
    """Compare positive days with each other and with negative days, per participant.

    Participants need at least two positive and one negative labelled day that
    have embeddings. Positive pairs are unordered and distinct; positive and
    negative days are compared on the full cross product.
    """
    report = LabelSimilarityReport()
    skipped = 0
    for pid, entries in sorted(labels.by_participant().items()):
        pos, neg = [], []
        for entry in sorted(entries, key=lambda e: e.date):
            if (pid, entry.date) not in store:
                skipped += 1
                continue
            (pos if entry.polarity == POSITIVE else neg).append(store.vector(pid, entry.date))
        if len(pos) < 2 or len(neg) < 1:
            continue
        P = _unit_rows(np.vstack(pos))
        N = _unit_rows(np.vstack(neg))
        pp = P @ P.T
        upper = np.triu_indices(len(pos), k=1)
        report.participants.append(ParticipantLabelSimilarity(
            pid, len(pos), len(neg), float(pp[upper].mean()), float((P @ N.T).mean())))
        report.n_positive += len(pos)
        report.n_negative += len(neg)
    if skipped:
        logger.warning(f"{skipped} labelled day(s) have no embedding and were ignored")
    if report.participants:
        pp_values = np.array([p.pos_pos for p in report.participants])
        pn_values = np.array([p.pos_neg for p in report.participants])
        report.pos_pos_mean, report.pos_pos_std = float(pp_values.mean()), float(pp_values.std())
        report.pos_neg_mean, report.pos_neg_std = float(pn_values.mean()), float(pn_values.std())
    logger.info(f"Label similarity over {report.n_participants} participant(s)")
    return report


# ----------------------------------------------------------------------------
# Cluster tables
# ----------------------------------------------------------------------------
def cluster_proportions(assignments: Dict[Key, int], k: Optional[int] = None) -> pd.DataFrame:
    """Fraction of each date's days per cluster label; one row per date."""
    if not assignments:
        raise AnalyticsError("no cluster assignments given")
    frame = pd.DataFrame([(date, label) for (_, date), label in assignments.items()],
                         columns=["date", "cluster"])
    if k is not None:
        outside = sorted(set(frame["cluster"][(frame["cluster"] < 0) | (frame["cluster"] >= k)]))
        if outside:
            raise AnalyticsError(f"cluster label(s) {outside} outside 0..{k - 1}")
    table = pd.crosstab(frame["date"], frame["cluster"], normalize="index")
    labels = range(k) if k is not None else sorted(frame["cluster"].unique())
    table = table.reindex(columns=list(labels), fill_value=0.0).sort_index()
    table.columns.name = "cluster"
    return table


def cluster_sample(assignments: Dict[Key, int], corpus, cluster_label: int, n: int = SAMPLE_SIZE,
                   rng: Optional[np.random.Generator] = None):
    """Uniform sample of day-strings from one cluster, without replacement."""
    members = sorted(key for key, label in assignments.items() if label == cluster_label)
    if not members:
        raise AnalyticsError(f"cluster {cluster_label} has no members")
    by_key = {record.key: record for record in corpus}
    missing = [key for key in members if key not in by_key]
    if missing:
        raise AnalyticsError(f"no day-string for {missing[0][0]} on {missing[0][1].isoformat()}")
    rng = rng or np.random.default_rng()
    picked = rng.choice(len(members), size=min(n, len(members)), replace=False)
    return [by_key[members[i]] for i in picked]


def participant_journeys(coordinates, keys: Sequence[Key], top_n: int = JOURNEY_PARTICIPANTS) -> pd.DataFrame:
    """Date-ordered 2-D paths for the participants with the most days."""
    coordinates = np.asarray(coordinates, dtype=np.float64)
    if coordinates.shape != (len(keys), 2):
        raise AnalyticsError("coordinates must be an (n, 2) matrix with one row per key")
    frame = pd.DataFrame({
        "participant_id": [k[0] for k in keys],
        "date": [k[1] for k in keys],
        "y1": coordinates[:, 0],
        "y2": coordinates[:, 1],
    })
    counts = frame.groupby("participant_id").size().reset_index(name="n")
    counts = counts.sort_values(["n", "participant_id"], ascending=[False, True])
    chosen = counts["participant_id"].head(top_n)
    frame = frame[frame["participant_id"].isin(chosen)].sort_values(["participant_id", "date"])
    frame.insert(2, "step", frame.groupby("participant_id").cumcount())
    return frame.reset_index(drop=True)


# ----------------------------------------------------------------------------
# CSV emitters
# ----------------------------------------------------------------------------
def write_search_results(path, hits: Sequence[SearchHit]):
    write_csv(path, (hit.to_dict() for hit in hits), ["rank", "participant_id", "date", "similarity"])


def write_similarity_matrix(path, sm: SimilarityMatrix):
    ensure_parent(path)
    sm.to_frame().to_csv(path, lineterminator="\n")


def write_label_similarity(path, report: LabelSimilarityReport):
    write_csv(path, ({"participant_id": p.participant_id, "n_positive": p.n_positive,
                      "n_negative": p.n_negative, "pos_pos": repr(p.pos_pos), "pos_neg": repr(p.pos_neg)}
                     for p in report.participants),
              ["participant_id", "n_positive", "n_negative", "pos_pos", "pos_neg"])


def write_proportions(path, table: pd.DataFrame):
    ensure_parent(path)
    out = table.copy()
    out.index = [d.isoformat() for d in out.index]
    out.index.name = "date"
    out.columns = [f"cluster_{c}" for c in out.columns]
    out.to_csv(path, lineterminator="\n")


def write_journeys(path, journeys: pd.DataFrame):
    ensure_parent(path)
    out = journeys.copy()
    out["date"] = [d.isoformat() for d in out["date"]]
    out.to_csv(path, index=False, lineterminator="\n")
