import datetime
from collections import Counter

import numpy as np
import pytest

import analytics
import store as store_module
from daystring import DayStringRecord
from errors import AnalyticsError
from ingest import NEGATIVE, POSITIVE, Label, LabelSet
from store import EmbeddingStore

D0 = datetime.date(2022, 1, 1)


def day(offset):
    return D0 + datetime.timedelta(days=offset)


def make_store(vectors, participants=('p1',)):
    vectors = np.asarray(vectors, dtype=np.float64)
    per = len(vectors) // len(participants)
    keys = [(participants[i // per], day(i % per)) for i in range(len(vectors))]
    return EmbeddingStore(keys, vectors)


def brute_cos(u, v):
    return float(np.dot(u, v) / (np.sqrt(np.dot(u, u)) * np.sqrt(np.dot(v, v))))


class TestStore:
    def test_lookup(self):
        s = make_store([[1, 0], [0, 1], [1, 1]])
        assert len(s) == 3 and s.dim == 2
        assert s.vector('p1', day(2)).tolist() == [1.0, 1.0]
        assert s.participant_rows('p1') == [0, 1, 2]

    def test_date_index(self):
        s = EmbeddingStore([('p2', day(1)), ('p1', D0), ('p1', day(1))], np.eye(3))
        assert s.date_rows(day(1)) == [0, 2]
        assert s.date_rows(D0) == [1]
        assert s.date_rows(day(5)) == []
        assert s.participant_rows('p1') == [1, 2]

    def test_duplicate_key(self):
        with pytest.raises(AnalyticsError):
            EmbeddingStore([('p1', D0), ('p1', D0)], np.ones((2, 2)))

    def test_read_only(self):
        s = make_store([[1, 0], [0, 1]])
        with pytest.raises(ValueError):
            s.vectors[0, 0] = 5.0

    def test_unknown_key(self):
        with pytest.raises(AnalyticsError):
            make_store([[1, 0], [0, 1]]).vector('p2', D0)

    def test_save_load(self, tmp_path, rng):
        s = make_store(rng.normal(size=(6, 3)), participants=('p1', 'p2'))
        path = tmp_path / 'embeddings.jsonl'
        store_module.save_store(s, path)
        loaded = store_module.load_store(path)
        assert loaded.keys == s.keys
        assert np.array_equal(loaded.vectors, s.vectors)


class TestCosine:
    def test_examples(self):
        assert analytics.cosine([1, 2], [1, 2]) == pytest.approx(1.0)
        assert analytics.cosine([1, 0], [0, 3]) == 0.0
        assert analytics.cosine([1, 2], [-1, -2]) == pytest.approx(-1.0)

    def test_zero_vector(self):
        with pytest.raises(AnalyticsError):
            analytics.cosine([0, 0], [1, 0])


class TestSearch:
    def test_self_first(self, rng):
        s = make_store(rng.normal(size=(10, 4)))
        hits = analytics.search(s, ('p1', day(3)), exclude_self=False)
        assert (hits[0].participant_id, hits[0].date) == ('p1', day(3))
        assert hits[0].similarity == pytest.approx(1.0)
        assert len(hits) == 9

    def test_exclude_self(self, rng):
        s = make_store(rng.normal(size=(10, 4)))
        hits = analytics.search(s, ('p1', day(3)), top_k=20)
        assert len(hits) == 9 and ('p1', day(3)) not in [(h.participant_id, h.date) for h in hits]

    def test_matches_brute_force(self, rng):
        vectors = rng.normal(size=(50, 6))
        s = make_store(vectors, participants=('p1', 'p2', 'p3', 'p4', 'p5'))
        keys = s.keys
        for q in range(0, 50, 7):
            expected = []
            for i in range(50):
                if i != q:
                    expected.append((-brute_cos(vectors[q], vectors[i]), keys[i][0], keys[i][1]))
            expected.sort()
            hits = analytics.search(s, keys[q], top_k=49)
            assert [(h.participant_id, h.date) for h in hits] == [(e[1], e[2]) for e in expected]
            assert all(abs(h.similarity + e[0]) < 1e-12 for h, e in zip(hits, expected))

    def test_ties_by_key(self):
        s = EmbeddingStore([('p2', D0), ('p1', day(1)), ('p1', D0)], np.ones((3, 2)))
        hits = analytics.search(s, np.array([1.0, 1.0]))
        assert [(h.participant_id, h.date) for h in hits] == [('p1', D0), ('p1', day(1)), ('p2', D0)]
        assert [h.rank for h in hits] == [1, 2, 3]

    def test_raw_vector_wrong_dimension(self, rng):
        with pytest.raises(AnalyticsError):
            analytics.search(make_store(rng.normal(size=(5, 3))), [1.0, 2.0])

    def test_unknown_key(self, rng):
        with pytest.raises(AnalyticsError):
            analytics.search(make_store(rng.normal(size=(5, 3))), ('p9', D0))

    def test_csv(self, tmp_path):
        path = tmp_path / 'search.csv'
        analytics.write_search_results(path, [analytics.SearchHit(1, 'p1', D0, 0.5)])
        assert path.read_text() == 'rank,participant_id,date,similarity\n1,p1,2022-01-01,0.5\n'


class TestSimilarityMatrix:
    def test_stride_size(self, rng):
        sm = analytics.participant_similarity_matrix(make_store(rng.normal(size=(40, 4))), 'p1', stride=20)
        assert sm.matrix.shape == (2, 2)
        assert sm.dates == [day(0), day(20)]

    def test_identical_days(self):
        sm = analytics.participant_similarity_matrix(make_store(np.ones((5, 3))), 'p1', stride=1)
        assert np.allclose(sm.matrix, 1.0)

    def test_matches_brute_force(self, rng):
        vectors = rng.normal(size=(5, 4))
        sm = analytics.participant_similarity_matrix(make_store(vectors), 'p1', stride=1)
        for i in range(5):
            for j in range(5):
                assert abs(sm.matrix[i, j] - brute_cos(vectors[i], vectors[j])) < 1e-12
        assert np.array_equal(sm.matrix, sm.matrix.T)

    def test_too_few_days(self, rng):
        with pytest.raises(AnalyticsError):
            analytics.participant_similarity_matrix(make_store(rng.normal(size=(20, 4))), 'p1', stride=20)

    def test_unknown_participant(self, rng):
        with pytest.raises(AnalyticsError):
            analytics.participant_similarity_matrix(make_store(rng.normal(size=(4, 2))), 'p7')

    def test_csv(self, tmp_path):
        sm = analytics.participant_similarity_matrix(make_store([[1, 0], [0, 1]]), 'p1', stride=1)
        path = tmp_path / 'similarity_p1.csv'
        analytics.write_similarity_matrix(path, sm)
        assert path.read_text().splitlines()[0] == 'date,2022-01-01,2022-01-02'


class TestLabelSimilarity:
    def test_example(self):
        s = EmbeddingStore([('p1', day(0)), ('p1', day(1)), ('p1', day(2))], [[1, 0], [1, 0], [0, 1]])
        labels = LabelSet((Label('p1', day(0), POSITIVE), Label('p1', day(1), POSITIVE),
                           Label('p1', day(2), NEGATIVE)))
        report = analytics.label_similarity(s, labels)
        assert report.n_participants == 1
        assert report.pos_pos_mean == pytest.approx(1.0) and report.pos_neg_mean == pytest.approx(0.0)
        assert report.pos_pos_std == 0.0

    def test_single_positive_excluded(self):
        s = EmbeddingStore([('p1', day(0)), ('p1', day(1))], [[1, 0], [0, 1]])
        labels = LabelSet((Label('p1', day(0), POSITIVE), Label('p1', day(1), NEGATIVE)))
        report = analytics.label_similarity(s, labels)
        assert report.n_participants == 0 and report.pos_pos_mean is None

    def test_matches_brute_force(self, rng):
        participants = ('p1', 'p2', 'p3', 'p4', 'p5')
        s = make_store(rng.normal(size=(100, 5)), participants=participants)
        entries = []
        for pid, date in s.keys:
            r = rng.random()
            if r < 0.2:
                entries.append(Label(pid, date, POSITIVE))
            elif r < 0.4:
                entries.append(Label(pid, date, NEGATIVE))
        report = analytics.label_similarity(s, LabelSet(tuple(entries)))

        expected = {}
        for pid in participants:
            pos = [s.vector(pid, e.date) for e in entries if e.participant_id == pid and e.polarity == POSITIVE]
            neg = [s.vector(pid, e.date) for e in entries if e.participant_id == pid and e.polarity == NEGATIVE]
            if len(pos) < 2 or not neg:
                continue
            pp = [brute_cos(pos[i], pos[j]) for i in range(len(pos)) for j in range(i + 1, len(pos))]
            pn = [brute_cos(u, v) for u in pos for v in neg]
            expected[pid] = (sum(pp) / len(pp), sum(pn) / len(pn))
        assert {p.participant_id for p in report.participants} == set(expected)
        for p in report.participants:
            assert abs(p.pos_pos - expected[p.participant_id][0]) < 1e-12
            assert abs(p.pos_neg - expected[p.participant_id][1]) < 1e-12
        pp_values = [v[0] for v in expected.values()]
        assert abs(report.pos_pos_mean - np.mean(pp_values)) < 1e-12
        assert abs(report.pos_pos_std - np.std(pp_values)) < 1e-12

    def test_unembedded_labels_ignored(self, caplog):
        s = EmbeddingStore([('p1', day(0)), ('p1', day(1)), ('p1', day(2))], [[1, 0], [1, 1], [0, 1]])
        labels = LabelSet((Label('p1', day(0), POSITIVE), Label('p1', day(1), POSITIVE),
                           Label('p1', day(2), NEGATIVE), Label('p1', day(9), POSITIVE)))
        report = analytics.label_similarity(s, labels)
        assert report.n_positive == 2
        assert any(r.levelname == 'WARNING' for r in caplog.records)


class TestClusterTables:
    def test_proportions_example(self):
        assignments = {('p1', D0): 0, ('p2', D0): 0, ('p3', D0): 1, ('p1', day(1)): 1}
        table = analytics.cluster_proportions(assignments, k=2)
        assert table.loc[D0].tolist() == pytest.approx([2 / 3, 1 / 3])
        assert table.loc[day(1)].tolist() == [0.0, 1.0]

    def test_rows_sum_to_one(self, rng):
        assignments = {(f'p{i}', day(int(rng.integers(10)))): int(rng.integers(5)) for i in range(300)}
        table = analytics.cluster_proportions(assignments)
        assert np.allclose(table.sum(axis=1), 1.0, atol=1e-9)

    def test_label_outside_k_rejected(self):
        assignments = {('p1', D0): 0, ('p2', D0): 1, ('p3', D0): 2}
        with pytest.raises(AnalyticsError):
            analytics.cluster_proportions(assignments, k=2)
        table = analytics.cluster_proportions(assignments, k=4)
        assert table.loc[D0].sum() == pytest.approx(1.0)
        assert table.loc[D0].tolist()[3] == 0.0

    def test_proportions_csv(self, tmp_path):
        path = tmp_path / 'proportions.csv'
        analytics.write_proportions(path, analytics.cluster_proportions({('p1', D0): 1}, k=2))
        assert path.read_text() == 'date,cluster_0,cluster_1\n2022-01-01,0.0,1.0\n'

    def corpus_for(self, keys):
        return [DayStringRecord(pid, date, 'Nowhere') for pid, date in keys]

    def test_sample_small_cluster(self, rng):
        assignments = {('p1', day(i)): 0 for i in range(3)}
        assignments[('p2', D0)] = 1
        picked = analytics.cluster_sample(assignments, self.corpus_for(assignments), 0, rng=rng)
        assert sorted(r.key for r in picked) == [('p1', day(i)) for i in range(3)]

    def test_sample_deterministic(self):
        assignments = {('p1', day(i)): 0 for i in range(20)}
        corpus = self.corpus_for(assignments)
        a = analytics.cluster_sample(assignments, corpus, 0, rng=np.random.default_rng(3))
        b = analytics.cluster_sample(assignments, corpus, 0, rng=np.random.default_rng(3))
        assert a == b and len(a) == 8

    def test_sample_uniform(self):
        assignments = {('p1', day(i)): 0 for i in range(20)}
        corpus = self.corpus_for(assignments)
        counts = Counter()
        for seed in range(10000):
            counts.update(r.key for r in analytics.cluster_sample(assignments, corpus, 0,
                                                                  rng=np.random.default_rng(seed)))
        assert len(counts) == 20
        assert all(abs(c / 10000 - 8 / 20) < 0.02 for c in counts.values())

    def test_sample_unknown_label(self, rng):
        with pytest.raises(AnalyticsError):
            analytics.cluster_sample({('p1', D0): 0}, self.corpus_for([('p1', D0)]), 4, rng=rng)

    def test_journeys(self, rng):
        keys = [('p1', day(i)) for i in range(4)] + [('p2', day(i)) for i in range(2)] + [('p3', D0)]
        coords = rng.normal(size=(len(keys), 2))
        frame = analytics.participant_journeys(coords[::-1], keys[::-1], top_n=2)
        assert list(frame.columns) == ['participant_id', 'date', 'step', 'y1', 'y2']
        assert frame['participant_id'].tolist() == ['p1'] * 4 + ['p2'] * 2
        assert frame['step'].tolist() == [0, 1, 2, 3, 0, 1]
        assert frame['date'].tolist()[:4] == [day(i) for i in range(4)]
