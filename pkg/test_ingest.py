import datetime
import random

import pytest
from hypothesis import given, settings as hsettings, strategies as st

import ingest
from conftest import event, ts
from errors import IngestError, LabelError

HEADER = b"participant_id,timestamp,location\n"


class TestParseEvents:
    def test_single_row(self):
        events = ingest.parse_events(HEADER + b"p1,2022-01-01T00:05:00Z,Kitchen\n")
        assert events == [ingest.SensorEvent('p1', datetime.datetime(2022, 1, 1, 0, 5, tzinfo=datetime.timezone.utc),
                                             'Kitchen')]

    def test_header_only(self):
        assert ingest.parse_events(HEADER) == []

    def test_empty_file(self):
        assert ingest.parse_events(b"") == []

    def test_bad_timestamp_names_line(self):
        with pytest.raises(IngestError) as err:
            ingest.parse_events(HEADER + b"p1,not-a-time,Kitchen\n")
        assert err.value.line == 2
        assert 'line 2' in str(err.value)

    def test_missing_field(self):
        with pytest.raises(IngestError) as err:
            ingest.parse_events(HEADER + b"p1,2022-01-01T00:05:00Z,Kitchen\np2,2022-01-01T00:06:00Z,\n")
        assert err.value.line == 3

    def test_wrong_header(self):
        with pytest.raises(IngestError):
            ingest.parse_events(b"who,when,where\np1,2022-01-01T00:05:00Z,Kitchen\n")

    def test_invalid_utf8_names_line(self):
        body = HEADER + b"p1,2022-01-01T00:00:00Z,Kitchen\np1,2022-01-01T00:01:00Z,Kit\xffchen\n"
        with pytest.raises(IngestError) as err:
            ingest.parse_events(body)
        assert err.value.line == 3
        assert 'UTF-8' in str(err.value)

    def test_byte_order_mark_skipped(self):
        events = ingest.parse_events(b"\xef\xbb\xbf" + HEADER + b"p1,2022-01-01T00:05:00Z,Kitchen\n")
        assert [e.location for e in events] == ['Kitchen']

    def test_file_stream(self, tmp_path):
        path = tmp_path / 'events.csv'
        path.write_bytes(HEADER + b"p1,2022-01-01T00:05:00Z,Bed\n")
        assert [e.location for e in ingest.load_events(path)] == ['Bed']

    def test_file_order_kept(self):
        body = HEADER + b"p2,2022-01-02T10:00:00Z,Lounge\np1,2022-01-01T00:00:00Z,Bed\n"
        assert [e.participant_id for e in ingest.parse_events(body)] == ['p2', 'p1']

    def test_offset_and_naive_timestamps_are_utc(self):
        assert ts('2022-01-01T01:00:00+01:00') == ts('2022-01-01T00:00:00Z')
        assert ts('2022-01-01T00:00:00') == ts('2022-01-01T00:00:00Z')
        assert ts('2022-01-01T00:00:00.750Z').microsecond == 0


class TestGroupDays:
    def test_one_day(self):
        events = [event('p1', f'2022-01-01T0{h}:00:00Z', 'Kitchen') for h in range(3)]
        days = ingest.group_days(events)
        assert len(days) == 1 and len(days[0].events) == 3

    def test_midnight_boundary(self):
        days = ingest.group_days([event('p1', '2022-01-01T23:59:00Z', 'Bed'),
                                  event('p1', '2022-01-02T00:01:00Z', 'Bed')])
        assert [d.date for d in days] == [datetime.date(2022, 1, 1), datetime.date(2022, 1, 2)]

    def test_interleaved_participants(self):
        days = ingest.group_days([event('p1', '2022-01-01T08:00:00Z', 'Kitchen'),
                                  event('p2', '2022-01-01T08:01:00Z', 'Lounge'),
                                  event('p1', '2022-01-01T08:02:00Z', 'Hallway')])
        assert [d.participant_id for d in days] == ['p1', 'p2']
        assert [e.location for e in days[0].events] == ['Kitchen', 'Hallway']

    @hsettings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(['p1', 'p2', 'p3']),
                              st.integers(0, 5 * 86400 - 1),
                              st.sampled_from(ingest.SENSOR_LOCATIONS)), max_size=60),
           st.randoms())
    def test_conservation_and_order_independence(self, rows, shuffler):
        base = datetime.datetime(2022, 3, 1, tzinfo=datetime.timezone.utc)
        events = [ingest.SensorEvent(p, base + datetime.timedelta(seconds=s), loc) for p, s, loc in rows]
        days = ingest.group_days(events)
        assert sorted(ingest.flatten_days(days)) == sorted(events)
        shuffled = list(events)
        shuffler.shuffle(shuffled)
        assert ingest.group_days(shuffled) == days
        for day in days:
            midnight = datetime.datetime(day.date.year, day.date.month, day.date.day, tzinfo=datetime.timezone.utc)
            assert all(midnight <= e.timestamp < midnight + datetime.timedelta(days=1) for e in day.events)
            assert [e.timestamp for e in day.events] == sorted(e.timestamp for e in day.events)

    def test_densify_fills_gaps(self):
        days = ingest.group_days([event('p1', '2022-01-01T08:00:00Z', 'Kitchen'),
                                  event('p1', '2022-01-04T08:00:00Z', 'Kitchen')])
        dense = ingest.densify_days(days)
        assert [d.date.day for d in dense] == [1, 2, 3, 4]
        assert dense[1].events == () and dense[2].events == ()


class TestValidateEvents:
    def test_clean(self):
        report = ingest.validate_events([event('p1', '2022-01-01T08:00:00Z', loc) for loc in ingest.SENSOR_LOCATIONS])
        assert report.total == 0 and report.findings == []

    def test_unknown_location(self):
        report = ingest.validate_events([event('p1', '2022-01-01T08:00:00Z', 'Garage')])
        assert report.unknown_locations == 1

    def test_duplicate(self):
        e = event('p1', '2022-01-01T08:00:00Z', 'Kitchen')
        report = ingest.validate_events([e, e])
        assert report.duplicates == 1

    def test_out_of_range(self):
        report = ingest.validate_events([event('p1', '1970-01-01T00:00:00Z', 'Kitchen')])
        assert report.out_of_range == 1

    def test_input_untouched(self):
        events = [event('p1', '2022-01-01T08:00:00Z', 'Garage')]
        copy = list(events)
        ingest.validate_events(events)
        assert events == copy


class TestLabels:
    LABEL_HEADER = b"participant_id,date,label\n"

    def test_single(self):
        labels = ingest.parse_labels(self.LABEL_HEADER + b"p1,2022-03-04,positive\n")
        assert labels.entries == (ingest.Label('p1', datetime.date(2022, 3, 4), 'positive'),)

    def test_conflict(self):
        with pytest.raises(LabelError):
            ingest.parse_labels(self.LABEL_HEADER + b"p1,2022-03-04,positive\np1,2022-03-04,negative\n")

    def test_duplicate_collapses(self):
        labels = ingest.parse_labels(self.LABEL_HEADER + b"p1,2022-03-04,positive\np1,2022-03-04,Positive\n")
        assert len(labels) == 1

    def test_empty_body(self):
        assert len(ingest.parse_labels(self.LABEL_HEADER)) == 0

    def test_unknown_polarity(self):
        with pytest.raises(LabelError) as err:
            ingest.parse_labels(self.LABEL_HEADER + b"p1,2022-03-04,maybe\n")
        assert err.value.line == 2

    def test_wrong_header_is_label_error(self):
        with pytest.raises(LabelError) as err:
            ingest.parse_labels(b"participant_id,day,label\np1,2022-03-04,positive\n")
        assert err.value.line == 1

    def test_invalid_utf8_is_label_error(self):
        with pytest.raises(LabelError) as err:
            ingest.parse_labels(self.LABEL_HEADER + b"p\xc3,2022-03-04,positive\n")
        assert err.value.line == 2


class TestCohortDescription:
    def test_summary(self):
        events = [event('p1', f'2022-01-0{d}T08:00:00Z', 'Kitchen') for d in range(1, 6)]
        events += [event('p2', '2022-01-03T08:00:00Z', 'Lounge')]
        summary = ingest.summarize_cohort(ingest.group_days(events))
        assert (summary.participants, summary.days, summary.events) == (2, 6, 6)
        assert (summary.days_min, summary.days_max, summary.days_median) == (1, 5, 3.0)
        assert summary.first_date == datetime.date(2022, 1, 1)

    def test_histogram_counts(self):
        rnd = random.Random(5)
        events = [event('p1', f'2022-01-01T{rnd.randrange(24):02d}:{rnd.randrange(60):02d}:00Z',
                        rnd.choice(ingest.SENSOR_LOCATIONS)) for _ in range(200)]
        table = ingest.location_histogram(events, bin_minutes=60)
        assert table['count'].sum() == 200
        assert table['bin'].between(0, 23).all()
