import io
import json

import jsonschema
import pytest

from tokendrop.config import load_schema
from tokendrop.trace import FIELDS, DropEvent, TraceRecorder, emit_trace, format_trace, read_trace, replay_trace


def test_empty_trace(tmp_path):
    buf = io.StringIO()
    emit_trace([], buf)
    assert buf.getvalue() == ""
    emit_trace([], tmp_path / "t.jsonl")
    assert (tmp_path / "t.jsonl").read_text() == ""


def test_record_field_order_and_nulls():
    rec = TraceRecorder()
    rec.add(0, "prefill", "prune", 1, [4], 0.5, float("inf"))
    line = format_trace(rec.events)
    assert tuple(json.loads(line)) == FIELDS
    assert json.loads(line)["threshold"] is None


def test_bad_events_rejected():
    with pytest.raises(ValueError):
        TraceRecorder().add(0, "train", "prune", 1, [1])
    with pytest.raises(ValueError):
        DropEvent.from_record({"seq": 0, "stage": "encode"})


def test_round_trip(needle_suite, tmp_path):
    path = tmp_path / "trace.jsonl"
    emit_trace(needle_suite.events, path)
    assert read_trace(path) == needle_suite.events


def test_records_match_schema(needle_suite):
    schema = load_schema("trace.schema.json")
    for line in format_trace(needle_suite.events[:500]).splitlines():
        jsonschema.validate(json.loads(line), schema)


def test_sequence_numbers_increase(needle_suite):
    seqs = [e.seq for e in needle_suite.events]
    assert seqs == list(range(len(seqs)))


def test_terminal_events_unique(blocks_suites):
    for suite in blocks_suites.values():
        seen = {}
        for e in suite.events:
            if e.kind == "merge":
                gone = set(e.ids) - {min(e.ids)}
            elif e.kind == "prune":
                gone = set(e.ids)
            else:
                continue
            for i in gone:
                key = (e.fixture, i)
                assert key not in seen
                seen[key] = e.seq


def assert_replay_matches(suite, toy):
    states = replay_trace(suite.events, toy.num_patches, toy.lm_layers)
    for idx, run in enumerate(suite.runs):
        st = states.get(idx)
        if st is None:
            # A fixture with no events at all: nothing merged, pruned or evicted.
            assert len(run.post_encode) == toy.num_patches and len(run.s_few) == toy.num_patches
            continue
        assert st.post_encode == set(run.post_encode)
        assert st.s_few == set(run.s_few)
        assert [set(x) for x in run.prefill_layers] == st.prefill_layers
        assert [set(x) for x in run.decode_layers] == st.decode_layers
        if suite.config.baseline == "mustdrop":
            assert st.key_set == set(run.key_set.member_ids)


def test_replay_reconstructs_sets(needle_suite, blocks_suites, toy):
    assert_replay_matches(needle_suite, toy)
    for suite in blocks_suites.values():
        assert_replay_matches(suite, toy)


def test_trace_deterministic(needle_config, weights, needle_fixtures, needle_suite):
    from tokendrop.pipeline import run_suite
    again = run_suite(needle_config, weights, needle_fixtures)
    assert format_trace(again.events) == format_trace(needle_suite.events)
