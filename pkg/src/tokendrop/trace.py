"""Drop-decision audit stream (one JSON object per line) and its replay.

Record fields, in order: ``seq, fixture, stage, kind, layer, ids, score,
threshold``. Kinds:

* ``merge``  (encode)  ``ids`` = window members, the survivor is ``min(ids)``;
  ``score`` = pairwise similarity sum, ``threshold`` = merge threshold.
* ``key``    (encode)  ``ids`` = protected key-token set; ``threshold`` = fence.
* ``prune``  (encode or prefill) one id removed from the live sequence;
  ``score`` = its importance score, ``threshold`` = cut-off (null if none).
* ``evict``  (decode)  one id dropped from one layer's cache.

``merge`` and ``prune`` are terminal for the ids they remove; ``evict`` only
touches the cache of ``layer``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

FIELDS = ("seq", "fixture", "stage", "kind", "layer", "ids", "score", "threshold")
STAGES = ("encode", "prefill", "decode")
KINDS = ("merge", "key", "prune", "evict")


def _finite(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass(frozen=True)
class DropEvent:
    seq: int
    fixture: int
    stage: str
    kind: str
    layer: int | None
    ids: tuple[int, ...]
    score: float | None = None
    threshold: float | None = None

    def to_record(self) -> dict:
        return {"seq": self.seq, "fixture": self.fixture, "stage": self.stage, "kind": self.kind,
                "layer": self.layer, "ids": [int(i) for i in self.ids],
                "score": _finite(self.score), "threshold": _finite(self.threshold)}

    @classmethod
    def from_record(cls, rec: dict) -> "DropEvent":
        if tuple(rec) != FIELDS:
            raise ValueError(f"trace record fields {tuple(rec)} != {FIELDS}")
        return cls(rec["seq"], rec["fixture"], rec["stage"], rec["kind"], rec["layer"],
                   tuple(rec["ids"]), rec["score"], rec["threshold"])


class TraceRecorder:
    """Hands out strictly increasing sequence numbers."""

    def __init__(self):
        self.events: list[DropEvent] = []

    def add(self, fixture, stage, kind, layer, ids, score=None, threshold=None):
        if stage not in STAGES or kind not in KINDS:
            raise ValueError(f"bad event {stage}/{kind}")
        ev = DropEvent(len(self.events), int(fixture), stage, kind,
                       None if layer is None else int(layer), tuple(int(i) for i in ids),
                       _finite(score), _finite(threshold))
        self.events.append(ev)
        return ev


def format_trace(events) -> str:
    return "".join(json.dumps(e.to_record(), separators=(",", ":")) + "\n" for e in events)


def emit_trace(events, destination) -> None:
    """Write events to a path or a text stream. Empty input writes nothing."""
    text = format_trace(events)
    if isinstance(destination, (str, Path)):
        Path(destination).write_text(text)
    else:
        destination.write(text)


def read_trace(source) -> list[DropEvent]:
    if isinstance(source, (str, Path)):
        source = io.StringIO(Path(source).read_text())
    return [DropEvent.from_record(json.loads(line)) for line in source if line.strip()]


@dataclass
class ReplayState:
    post_encode: set = field(default_factory=set)
    key_set: set = field(default_factory=set)
    s_few: set = field(default_factory=set)
    prefill_layers: list = field(default_factory=list)
    decode_layers: list = field(default_factory=list)
    pruned: set = field(default_factory=set)
    evicted: set = field(default_factory=set)


def replay_trace(events, num_patches: int, num_layers: int) -> dict[int, ReplayState]:
    """Rebuild, per fixture, the surviving vision sets at every stage."""
    by_fixture: dict[int, list[DropEvent]] = {}
    for e in events:
        by_fixture.setdefault(e.fixture, []).append(e)
    out = {}
    for fx, evs in sorted(by_fixture.items()):
        alive = set(range(1, num_patches + 1))
        st = ReplayState()
        prefill_prunes: list[tuple[int, int]] = []
        for e in evs:
            if e.kind == "merge":
                alive -= set(e.ids) - {min(e.ids)}
            elif e.kind == "key":
                st.key_set = set(e.ids)
            elif e.kind == "prune" and e.stage == "encode":
                alive -= set(e.ids)
        st.post_encode = set(alive)
        for e in evs:
            if e.kind == "prune" and e.stage == "prefill":
                prefill_prunes.extend((e.layer, i) for i in e.ids)
                st.pruned |= set(e.ids)
        st.s_few = st.post_encode - st.pruned
        st.prefill_layers = [
            st.post_encode - {i for lyr, i in prefill_prunes if lyr < layer} for layer in range(num_layers)
        ]
        st.decode_layers = [set(s) for s in st.prefill_layers]
        for e in evs:
            if e.kind == "evict":
                st.decode_layers[e.layer] -= set(e.ids)
                st.evicted |= set(e.ids)
        out[fx] = st
    return out
