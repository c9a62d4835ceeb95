import io

import pytest

from crowdctl.trace import BallotEvent, BallotTrace, TraceFormatError, read_gold, write_gold


def test_simultaneous_events_are_ordered():
    tr = BallotTrace([BallotEvent(5, 3, 1, 1, 0), BallotEvent(5, 2, 9, 0, 0), BallotEvent(5, 2, 4, 1, 0)])
    assert [(e.task_id, e.worker_id) for e in tr] == [(2, 4), (2, 9), (3, 1)]


@pytest.mark.parametrize("ev", [BallotEvent(0, 0, 0, 2, 0), BallotEvent(-1, 0, 0, 1, 0),
                                BallotEvent(0, 0, 0, 1, 6)])
def test_invalid_events(ev):
    with pytest.raises(ValueError):
        BallotTrace([ev], 6)


@pytest.mark.parametrize("text,line", [
    ("time,task\n", 1),
    ("timestamp_sec,task_id,worker_id,label,pay_level\n0,1,2,1\n", 2),
    ("timestamp_sec,task_id,worker_id,label,pay_level\n0,1,2,1,0\n1,x,2,1,0\n", 3),
    ("timestamp_sec,task_id,worker_id,label,pay_level\n0,1,2,3,0\n", 2),
])
def test_malformed_csv_reports_line(text, line):
    with pytest.raises(TraceFormatError, match=f"line {line}"):
        BallotTrace.from_csv(io.StringIO(text), 6)


def test_pay_level_outside_grid():
    text = "timestamp_sec,task_id,worker_id,label,pay_level\n0,1,2,1,7\n"
    with pytest.raises(TraceFormatError):
        BallotTrace.from_csv(io.StringIO(text), 6)


def test_gold_round_trip(tmp_path):
    p = tmp_path / "gold.csv"
    write_gold({3: 1, 0: 0, 7: 1}, p)
    assert read_gold(p) == {0: 0, 3: 1, 7: 1}
    p.write_text("task_id,label\n1,2\n")
    with pytest.raises(TraceFormatError):
        read_gold(p)
