"""Dataset construction from recording metadata: capped event curation, the
k-shot sampler, and the downstream split builders.

All randomness is keyed by ``(seed, crc32(name))`` so a species or recording
always gets the same stream regardless of what else is in the corpus.
"""

from __future__ import annotations

import json
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels

CLIP_SECONDS = 5.0
SHORT_SECONDS = 5.0
FALLBACK_SECONDS = 20.0
_UNBOUNDED = 2**62


@dataclass(frozen=True)
class RecordingMeta:
    recording_id: str
    species: str
    secondary_species: Sequence[str] = ()
    duration_s: float = 0.0
    events: Sequence[tuple[float, float]] = ()

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"{self.recording_id}: duration must be positive")
        evs = tuple(sorted((float(a), float(b)) for a, b in self.events))
        for a, b in evs:
            if not 0.0 <= a <= b <= self.duration_s + 1e-9:
                raise ValueError(f"{self.recording_id}: event ({a}, {b}) outside [0, {self.duration_s}]")
        object.__setattr__(self, "events", evs)
        object.__setattr__(self, "secondary_species", tuple(self.secondary_species))


@dataclass(frozen=True)
class CurationConfig:
    max_events_per_species: float = 500
    max_events_per_recording: float = 2
    min_events_per_recording: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.max_events_per_recording >= self.min_events_per_recording >= 1:
            raise ValueError("need max_events_per_recording >= min_events_per_recording >= 1")


@dataclass(frozen=True)
class Clip:
    clip_id: str
    recording_id: str
    start_s: float
    labels: tuple[int, ...]
    event_index: int | None = None
    species: str = ""

    def to_json(self) -> dict:
        return {"clip_id": self.clip_id, "recording_id": self.recording_id, "start_s": self.start_s,
                "labels": list(self.labels), "event_index": self.event_index}


def _key(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def _cap(value) -> int:
    return _UNBOUNDED if value is None or math.isinf(value) else int(value)


def _by_species(metas: Iterable[RecordingMeta]) -> dict[str, list[RecordingMeta]]:
    groups: dict[str, list[RecordingMeta]] = defaultdict(list)
    for m in metas:
        groups[m.species].append(m)
    return {s: sorted(rs, key=lambda m: m.recording_id) for s, rs in sorted(groups.items())}


def curate_pretrain(metas: Sequence[RecordingMeta], cfg: CurationConfig = CurationConfig()) -> list[tuple[str, int]]:
    """Select ``(recording_id, event_index)`` pairs under the species cap, the
    per-recording cap, and the per-recording floor.

    Over-full species are trimmed one event at a time from the recording that
    currently holds the most (lowest id first), always dropping its latest
    event. Only when every recording is at the floor are whole recordings
    removed, in a seeded order.
    """
    species_cap = _cap(cfg.max_events_per_species)
    rec_cap = _cap(cfg.max_events_per_recording)
    floor = int(cfg.min_events_per_recording)
    selected: list[tuple[str, int]] = []
    for species, recs in _by_species(metas).items():
        recs = [r for r in recs if r.events]
        if not recs:
            continue
        counts = np.array([min(len(r.events), rec_cap) for r in recs], dtype=np.int64)
        drop_order = _key(cfg.seed, species).permutation(len(recs)).astype(np.int64)
        kept = kernels.trim_counts(counts, species_cap, floor, drop_order)
        for r, n in zip(recs, kept):
            selected.extend((r.recording_id, i) for i in range(int(n)))
    return selected


def check_curation(metas: Sequence[RecordingMeta], selection: Sequence[tuple[str, int]],
                   cfg: CurationConfig = CurationConfig()) -> list[str]:
    """Independent constraint check; returns a list of violations (empty = valid)."""
    by_id = {m.recording_id: m for m in metas}
    problems = []
    if len(set(selection)) != len(selection):
        problems.append("duplicate selections")
    per_rec: dict[str, int] = defaultdict(int)
    per_species: dict[str, int] = defaultdict(int)
    for rid, ev in selection:
        meta = by_id.get(rid)
        if meta is None or not 0 <= ev < len(meta.events):
            problems.append(f"unknown event {rid}#{ev}")
            continue
        per_rec[rid] += 1
        per_species[meta.species] += 1
    species_cap = cfg.max_events_per_species
    rec_cap = cfg.max_events_per_recording
    for sp, n in per_species.items():
        if n > species_cap:
            problems.append(f"species {sp} has {n} > {species_cap} events")
    for rid, n in per_rec.items():
        if n > rec_cap:
            problems.append(f"recording {rid} has {n} > {rec_cap} events")
        if n < min(cfg.min_events_per_recording, len(by_id[rid].events)):
            problems.append(f"recording {rid} has {n} events, under the floor")
    # Floor coverage: every recording survives unless the species cap leaves no room.
    candidates: dict[str, list[str]] = defaultdict(list)
    for m in metas:
        if m.events:
            candidates[m.species].append(m.recording_id)
    for sp, rids in candidates.items():
        if len(rids) * cfg.min_events_per_recording <= species_cap:
            missing = [r for r in rids if per_rec.get(r, 0) == 0]
            if missing:
                problems.append(f"species {sp}: recordings dropped although the cap allows them: {missing[:3]}")
        elif per_species.get(sp, 0) < species_cap - cfg.min_events_per_recording + 1:
            problems.append(f"species {sp}: trimmed further than the cap requires")
    return problems


def clip_start(event: tuple[float, float] | None, duration: float, clip_s: float = CLIP_SECONDS) -> float:
    """Start of a ``clip_s`` window centred on ``event``, kept inside the recording."""
    mid = duration / 2.0 if event is None else (event[0] + event[1]) / 2.0
    return float(min(max(mid - clip_s / 2.0, 0.0), max(duration - clip_s, 0.0)))


def vocabulary(metas: Iterable[RecordingMeta]) -> list[str]:
    return sorted({m.species for m in metas})


def _labels(meta: RecordingMeta, index: dict[str, int]) -> tuple[int, ...]:
    names = [meta.species, *meta.secondary_species]
    return tuple(sorted({index[n] for n in names if n in index}))


def _clip(meta: RecordingMeta, ev: int | None, index: dict[str, int]) -> Clip:
    event = meta.events[ev] if ev is not None else None
    suffix = f"e{ev}" if ev is not None else "whole"
    return Clip(f"{meta.recording_id}:{suffix}", meta.recording_id, clip_start(event, meta.duration_s),
                _labels(meta, index), ev, meta.species)


def eligible(meta: RecordingMeta) -> str | None:
    """'short' (<= 5 s), 'fallback' (<= 20 s, no secondary species) or None."""
    if meta.duration_s <= SHORT_SECONDS:
        return "short"
    if meta.duration_s <= FALLBACK_SECONDS and not meta.secondary_species:
        return "fallback"
    return None


def sample_fewshot(metas: Sequence[RecordingMeta], k: int, seed: int = 0,
                   classes: Sequence[str] | None = None) -> list[Clip]:
    """Up to ``k`` event clips per species.

    Each eligible recording contributes one randomly chosen primary clip; its
    other events are leftovers. Per species the pool is drawn in tiers: short
    recordings' primaries, fallback recordings' primaries, then leftovers.
    Ineligible recordings are never used.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    vocab = list(classes) if classes is not None else vocabulary(metas)
    index = {s: i for i, s in enumerate(vocab)}
    out: list[Clip] = []
    for species, recs in _by_species(metas).items():
        if species not in index:
            continue
        tiers: dict[str, list[Clip]] = {"short": [], "fallback": [], "leftover": []}
        for meta in recs:
            tier = eligible(meta)
            if tier is None:
                continue
            clips = [_clip(meta, i, index) for i in range(len(meta.events))] or [_clip(meta, None, index)]
            pick = int(_key(seed, meta.recording_id).integers(len(clips)))
            tiers[tier].append(clips[pick])
            tiers["leftover"].extend(c for i, c in enumerate(clips) if i != pick)
        rng = _key(seed, species)
        chosen: list[Clip] = []
        for name in ("short", "fallback", "leftover"):
            need = k - len(chosen)
            pool = tiers[name]
            if need <= 0:
                break
            if len(pool) <= need:
                chosen.extend(pool)
            else:
                picks = np.sort(rng.choice(len(pool), size=need, replace=False))
                chosen.extend(pool[i] for i in picks)
        out.extend(chosen)
    return out


def sample_downstream(metas: Sequence[RecordingMeta], task_style: str, seed: int = 0) -> list[Clip]:
    if task_style == "high_class_count":
        return sample_fewshot(metas, 64, seed)
    if task_style != "low_class_count":
        raise ValueError(f"unknown task style {task_style!r}")
    sel = curate_pretrain(metas, CurationConfig(500, 5, 1, seed))
    by_id = {m.recording_id: m for m in metas}
    index = {s: i for i, s in enumerate(vocabulary(metas))}
    return [_clip(by_id[rid], ev, index) for rid, ev in sel]


def selection_clips(metas: Sequence[RecordingMeta], selection: Sequence[tuple[str, int]]) -> list[Clip]:
    by_id = {m.recording_id: m for m in metas}
    index = {s: i for i, s in enumerate(vocabulary(metas))}
    return [_clip(by_id[rid], ev, index) for rid, ev in selection]


# -- JSON lines ------------------------------------------------------------------


def read_metas(path) -> list[RecordingMeta]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                o = json.loads(line)
                out.append(RecordingMeta(str(o["recording_id"]), str(o["species"]),
                                         [str(s) for s in o.get("secondary", [])],
                                         float(o["duration_s"]), [tuple(e) for e in o.get("events", [])]))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad metadata record ({exc})") from None
    return out


def write_metas(path, metas: Iterable[RecordingMeta]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in metas:
            fh.write(json.dumps({"recording_id": m.recording_id, "species": m.species,
                                 "secondary": list(m.secondary_species), "duration_s": m.duration_s,
                                 "events": [list(e) for e in m.events]}) + "\n")


def write_split(path, clips: Iterable[Clip]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for c in clips:
            fh.write(json.dumps(c.to_json()) + "\n")
            n += 1
    return n


def read_split(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
