import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bmae import curate as cu
from bmae import synthetic
from bmae.curate import CurationConfig, RecordingMeta


def rec(rid, species, n_events, duration=30.0, secondary=()):
    evs = [(i * 1.0, i * 1.0 + 0.5) for i in range(n_events)]
    return RecordingMeta(rid, species, secondary, duration, evs)


def by_rec(selection):
    out = {}
    for rid, ev in selection:
        out.setdefault(rid, []).append(ev)
    return out


def test_meta_validation():
    with pytest.raises(ValueError):
        RecordingMeta("a", "s", (), 0.0, [])
    with pytest.raises(ValueError):
        RecordingMeta("a", "s", (), 5.0, [(4.0, 6.0)])
    m = RecordingMeta("a", "s", (), 5.0, [(3.0, 4.0), (1.0, 2.0)])
    assert m.events == ((1.0, 2.0), (3.0, 4.0))
    with pytest.raises(ValueError):
        CurationConfig(max_events_per_recording=0)


def test_small_worked_example():
    metas = [rec("A", "s", 3), rec("B", "s", 1)]
    sel = cu.curate_pretrain(metas, CurationConfig(500, 2))
    assert by_rec(sel) == {"A": [0, 1], "B": [0]}


def brute_force_kept(counts, species_cap, rec_cap):
    """Enumerate all per-recording counts within the caps and floor, and return
    the feasible total closest to the cap (the selection size the rules imply)."""
    capped = [min(c, rec_cap) for c in counts]
    best = None
    for combo in itertools.product(*[range(1, c + 1) for c in capped]):
        if sum(combo) <= species_cap and (best is None or sum(combo) > best):
            best = sum(combo)
    return best


@given(st.lists(st.integers(1, 5), min_size=1, max_size=5), st.integers(5, 20), st.integers(1, 4))
def test_selection_size_matches_brute_force(counts, species_cap, rec_cap):
    metas = [rec(f"r{i}", "s", c) for i, c in enumerate(counts)]
    sel = cu.curate_pretrain(metas, CurationConfig(species_cap, rec_cap))
    expected = brute_force_kept(counts, species_cap, rec_cap)
    if expected is not None:
        assert len(sel) == expected
    assert cu.check_curation(metas, sel, CurationConfig(species_cap, rec_cap)) == []


def test_species_cap_with_many_two_event_recordings():
    metas = [rec(f"r{i:03d}", "s", 2) for i in range(300)]
    sel = cu.curate_pretrain(metas, CurationConfig(500, 2))
    assert len(sel) == 500
    assert set(by_rec(sel)) == {m.recording_id for m in metas}


def test_unbounded_caps_are_identity():
    metas = [rec("a", "x", 4), rec("b", "x", 1), rec("c", "y", 7)]
    sel = cu.curate_pretrain(metas, CurationConfig(math.inf, math.inf))
    assert sorted(sel) == sorted((m.recording_id, i) for m in metas for i in range(len(m.events)))


def test_trim_prefers_fullest_then_lowest_id():
    metas = [rec("b", "s", 2), rec("a", "s", 2), rec("c", "s", 1)]
    sel = cu.curate_pretrain(metas, CurationConfig(4, 2))
    assert by_rec(sel) == {"a": [0], "b": [0, 1], "c": [0]}


def test_whole_recordings_dropped_only_at_the_floor():
    metas = [rec(f"r{i}", "s", 3) for i in range(10)]
    sel = cu.curate_pretrain(metas, CurationConfig(6, 2, seed=4))
    kept = by_rec(sel)
    assert len(sel) == 6 and all(v == [0] for v in kept.values())
    again = cu.curate_pretrain(metas, CurationConfig(6, 2, seed=4))
    assert again == sel


def test_checker_catches_violations():
    metas = [rec("a", "s", 3), rec("b", "s", 1)]
    cfg = CurationConfig(500, 2)
    assert cu.check_curation(metas, [("a", 0), ("a", 1), ("a", 2), ("b", 0)], cfg)
    assert cu.check_curation(metas, [("a", 0)], cfg)  # b dropped for no reason
    assert cu.check_curation(metas, [("a", 0), ("a", 0), ("b", 0)], cfg)


@st.composite
def corpus(draw):
    n_species = draw(st.integers(1, 4))
    metas = []
    for s in range(n_species):
        for r in range(draw(st.integers(1, 8))):
            metas.append(rec(f"s{s}r{r}", f"s{s}", draw(st.integers(0, 6))))
    return metas


@given(corpus(), st.integers(1, 15), st.integers(1, 4), st.integers(0, 30), st.integers(0, 3))
def test_raising_caps_never_removes_events(metas, species_cap, rec_cap, extra, seed):
    lo = set(cu.curate_pretrain(metas, CurationConfig(species_cap, rec_cap, seed=seed)))
    more_species = set(cu.curate_pretrain(metas, CurationConfig(species_cap + extra, rec_cap, seed=seed)))
    more_rec = set(cu.curate_pretrain(metas, CurationConfig(species_cap, rec_cap + extra % 4, seed=seed)))
    assert lo <= more_species
    assert lo <= more_rec


@given(corpus(), st.integers(1, 15), st.integers(1, 4), st.integers(0, 3))
def test_curation_satisfies_every_constraint(metas, species_cap, rec_cap, seed):
    cfg = CurationConfig(species_cap, rec_cap, seed=seed)
    assert cu.check_curation(metas, cu.curate_pretrain(metas, cfg), cfg) == []


def test_redundant_corpus_is_roughly_halved():
    metas = synthetic.redundant_corpus(seed=0)
    total = sum(len(m.events) for m in metas)
    kept = len(cu.curate_pretrain(metas, CurationConfig(500, 2)))
    assert 0.45 <= kept / total <= 0.55


def test_clip_start_centres_and_clamps():
    assert cu.clip_start((10.0, 11.0), 30.0) == 8.0
    assert cu.clip_start((0.2, 0.4), 30.0) == 0.0
    assert cu.clip_start((29.0, 29.8), 30.0) == 25.0
    assert cu.clip_start(None, 3.0) == 0.0


def test_eligibility_tiers():
    assert cu.eligible(rec("a", "s", 1, duration=4.0, secondary=("t",))) == "short"
    assert cu.eligible(rec("a", "s", 1, duration=12.0)) == "fallback"
    assert cu.eligible(rec("a", "s", 1, duration=12.0, secondary=("t",))) is None
    assert cu.eligible(rec("a", "s", 1, duration=25.0)) is None


def test_fewshot_distinct_recordings_and_exact_k():
    metas = [rec(f"r{i}", "s", 3, duration=4.5) for i in range(10)]
    clips = cu.sample_fewshot(metas, 5, seed=1)
    assert len(clips) == 5 and len({c.recording_id for c in clips}) == 5


def test_fewshot_fewer_than_k():
    metas = [rec("only", "s", 1, duration=4.0), rec("long", "s", 3, duration=60.0)]
    clips = cu.sample_fewshot(metas, 5, seed=0)
    assert [c.recording_id for c in clips] == ["only"]


def test_fewshot_uses_leftovers_after_primaries():
    metas = [rec("a", "s", 3, duration=4.9), rec("b", "s", 1, duration=4.9)]
    clips = cu.sample_fewshot(metas, 3, seed=0)
    assert len(clips) == 3
    assert len({(c.recording_id, c.event_index) for c in clips}) == 3
    with pytest.raises(ValueError):
        cu.sample_fewshot(metas, 0)


def test_fewshot_short_tier_first():
    metas = [rec(f"long{i}", "s", 1, duration=15.0) for i in range(5)] + [rec("short", "s", 1, duration=3.0)]
    for seed in range(5):
        assert "short" in {c.recording_id for c in cu.sample_fewshot(metas, 1, seed)}


def test_downstream_styles():
    metas = [rec(f"r{i:03d}", "s", 2, duration=4.0) for i in range(100)]
    assert len(cu.sample_downstream(metas, "high_class_count")) == 64
    big = [rec(f"r{i}", "s", 9) for i in range(3)]
    low = cu.sample_downstream(big, "low_class_count")
    assert max(len(v) for v in by_rec([(c.recording_id, c.event_index) for c in low]).values()) == 5
    assert cu.sample_downstream([], "low_class_count") == []
    with pytest.raises(ValueError):
        cu.sample_downstream(metas, "medium")


@st.composite
def fewshot_corpus(draw):
    metas = []
    for s in range(draw(st.integers(1, 4))):
        for r in range(draw(st.integers(0, 12))):
            dur = draw(st.sampled_from([2.0, 4.0, 5.0, 8.0, 19.0, 30.0]))
            n_ev = draw(st.integers(0, 4))
            sec = ("x",) if draw(st.booleans()) else ()
            metas.append(RecordingMeta(f"s{s}r{r}", f"s{s}", sec, dur,
                                       [(dur * i / 5, dur * i / 5 + 0.1) for i in range(n_ev)]))
    return metas


@given(fewshot_corpus(), st.sampled_from([1, 5, 10]), st.integers(0, 5))
def test_fewshot_properties(metas, k, seed):
    clips = cu.sample_fewshot(metas, k, seed)
    assert clips == cu.sample_fewshot(metas, k, seed)
    keys = [(c.recording_id, c.event_index) for c in clips]
    assert len(keys) == len(set(keys))
    by_id = {m.recording_id: m for m in metas}
    for species in cu.vocabulary(metas):
        mine = [c for c in clips if c.species == species]
        eligible = [m for m in metas if m.species == species and cu.eligible(m)]
        assert len(mine) <= k
        assert all(cu.eligible(by_id[c.recording_id]) for c in mine)
        if len(eligible) >= k:
            assert len(mine) == k
    for c in clips:
        m = by_id[c.recording_id]
        assert 0.0 <= c.start_s <= max(m.duration_s - 5.0, 0.0)


def test_jsonl_round_trips(tmp_path):
    metas = [rec("a", "s", 2, secondary=("t",)), rec("b", "t", 0, duration=3.0)]
    cu.write_metas(tmp_path / "m.jsonl", metas)
    assert cu.read_metas(tmp_path / "m.jsonl") == metas
    clips = cu.sample_fewshot(metas, 1)
    assert cu.write_split(tmp_path / "s.jsonl", clips) == len(clips)
    rows = cu.read_split(tmp_path / "s.jsonl")
    assert set(rows[0]) >= {"clip_id", "recording_id", "start_s", "labels"}
    (tmp_path / "bad.jsonl").write_text(json.dumps({"recording_id": "x"}) + "\n")
    with pytest.raises(ValueError):
        cu.read_metas(tmp_path / "bad.jsonl")
