import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccsq.dataset import (
    DatasetManifest,
    FoldPlan,
    UtteranceRecord,
    load_manifest,
    make_random_folds,
    make_speaker_folds,
    map_arousal,
    merge_manifests,
    write_manifest,
)
from ccsq.errors import ConfigurationError, RangeError, ValidationError

from oracles import greedy_speaker_folds

HEADER = "utterance_id,video_id,speaker_id,arousal,valence,feature_path,arousal_range\n"


def manifest_from(speakers, partition="train", prefix="u"):
    recs = [
        UtteranceRecord(f"{prefix}{i:04d}", f"v{i}", spk, 0.0, 0.0, f"{prefix}{i:04d}.csv")
        for i, spk in enumerate(speakers)
    ]
    return DatasetManifest(partition, tuple(recs))


def test_map_arousal():
    assert map_arousal(0.0) == -1.0
    assert map_arousal(0.5) == 0.0
    assert map_arousal(1.0) == 1.0
    with pytest.raises(RangeError, match="1.2"):
        map_arousal(1.2)
    grid = np.linspace(0, 1, 101)
    out = [map_arousal(g) for g in grid]
    assert np.all(np.diff(out) > 0) and min(out) >= -1 and max(out) <= 1


def test_load_manifest(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(HEADER + "a,v1,s1,0.75,0.1,a.csv,unit\n"
                 "b,v1,s1,-0.5,-0.2,b.csv,signed\n"
                 "c,v2,s2,0.0,0.9,c.csv,unit\n")
    m = load_manifest(p)
    assert len(m) == 3
    assert [r.arousal for r in m] == [0.5, -0.5, -1.0]
    assert m.speakers == ["s1", "s2"]

    p.write_text(HEADER + "a,v1,s1,0.5,0,a.csv,unit\na,v1,s1,0.5,0,b.csv,unit\n")
    with pytest.raises(ValidationError, match="'a'"):
        load_manifest(p)

    p.write_text(HEADER + "a,v1,s1,1.2,0,a.csv,unit\n")
    with pytest.raises(RangeError, match="line 2"):
        load_manifest(p)

    p.write_text(HEADER + "a,v1,s1,0.5,0,a.csv,unit\nb,v1,s1,oops,0,b.csv,unit\n")
    with pytest.raises(ValidationError, match="line 3"):
        load_manifest(p)

    p.write_text(HEADER + "a,v1,s1,0.5,0,a.csv,\n")
    with pytest.raises(ValidationError, match="arousal_range"):
        load_manifest(p)


def test_manifest_invariants():
    r = UtteranceRecord("a", "v", "s", 0.0, 0.0, "x.csv")
    with pytest.raises(ValidationError):
        DatasetManifest("train", ())
    with pytest.raises(ValidationError):
        DatasetManifest("train", (r, UtteranceRecord("b", "v", "s", 0.0, 0.0, "x.csv")))
    with pytest.raises(ValidationError):
        DatasetManifest("holdout", (r,))
    with pytest.raises(RangeError):
        UtteranceRecord("a", "v", "s", 0.0, 1.5, "x.csv")


def test_write_then_load_round_trip(tmp_path):
    m = manifest_from(["x", "y", "x"])
    write_manifest(m, tmp_path / "m.csv")
    assert load_manifest(tmp_path / "m.csv") == m


def test_random_folds_examples():
    six = manifest_from(list("abcdef"))
    plan = make_random_folds(six, 3, 1)
    assert sorted(plan.fold_sizes()) == [2, 2, 2]
    assert dict(plan.assignment) == dict(make_random_folds(six, 3, 1).assignment)
    assert sorted(make_random_folds(manifest_from(list("abcdefg")), 3, 0).fold_sizes()) == [2, 2, 3]
    with pytest.raises(ConfigurationError):
        make_random_folds(six, 1, 0)
    with pytest.raises(ConfigurationError):
        make_random_folds(six, 7, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.integers(2, 12), st.integers(0, 2**63 - 1))
def test_random_fold_spread(n, k, seed):
    if n < k:
        return
    sizes = make_random_folds(manifest_from(["s"] * n), k, seed).fold_sizes()
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n


def test_speaker_folds_example():
    m = manifest_from(["A"] * 4 + ["B"] * 3 + ["C"] * 2 + ["D"])
    plan = make_speaker_folds(m, 2, 0)
    groups = {}
    for r in m:
        groups.setdefault(plan.assignment[r.utterance_id], set()).add(r.speaker_id)
    assert sorted(map(frozenset, groups.values()), key=sorted) == [{"A", "D"}, {"B", "C"}]
    assert sorted(plan.fold_sizes()) == [5, 5]
    assert plan.speaker_disjoint
    with pytest.raises(ConfigurationError):
        make_speaker_folds(manifest_from(["A", "A", "A"]), 2, 0)


def test_speaker_folds_match_greedy_oracle_and_are_disjoint():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n_spk = int(rng.integers(2, 12))
        k = int(rng.integers(2, n_spk + 1))
        counts = rng.integers(1, 8, n_spk)
        speakers = [f"s{j}" for j, c in enumerate(counts) for _ in range(c)]
        speakers = [speakers[i] for i in rng.permutation(len(speakers))]
        m = manifest_from(speakers)
        plan = make_speaker_folds(m, k, 0)
        plan.check(m)
        sets = [set() for _ in range(k)]
        for r in m:
            sets[plan.assignment[r.utterance_id]].add(r.speaker_id)
        for i in range(k):
            for j in range(i + 1, k):
                assert not sets[i] & sets[j]
        assert set().union(*sets) == set(speakers)
        members, load = greedy_speaker_folds({f"s{j}": int(c) for j, c in enumerate(counts)}, k)
        assert [set(g) for g in members] == sets
        assert plan.fold_sizes() == load


def test_folds_are_pure():
    m = manifest_from([f"s{i % 5}" for i in range(40)])
    assert make_speaker_folds(m, 3, 9) == make_speaker_folds(m, 3, 9)
    assert make_random_folds(m, 4, 9) == make_random_folds(m, 4, 9)
    assert make_random_folds(m, 4, 9) != make_random_folds(m, 4, 10)


def test_fold_plan_serialization():
    m = manifest_from([f"s{i % 5}" for i in range(20)])
    for plan in (make_random_folds(m, 4, 123), make_speaker_folds(m, 3, 2**63 - 1)):
        text = plan.dumps()
        assert text.splitlines()[0].startswith("# k=")
        back = FoldPlan.loads(text)
        assert back == plan and back.order == plan.order
    with pytest.raises(ValidationError):
        FoldPlan.loads("utterance_id,fold\na,0\n")
    with pytest.raises(ValidationError):
        FoldPlan(2, {"a": 0, "b": 0}, False, 0)


def test_check_rejects_mismatch():
    m = manifest_from(["a", "b", "a", "b"])
    plan = FoldPlan(2, {"u0000": 0, "u0001": 1, "u0002": 1, "u0003": 0}, True, 0)
    with pytest.raises(ValidationError, match="spans"):
        plan.check(m)
    with pytest.raises(ValidationError):
        make_random_folds(manifest_from(["a"] * 3), 2, 0).check(m)


def test_merge_manifests():
    a = manifest_from(["x", "y"], prefix="a")
    b = manifest_from(["z"], partition="dev", prefix="b")
    merged = merge_manifests(a, b)
    assert len(merged) == 3
    with pytest.raises(ValidationError, match="a0000"):
        merge_manifests(a, a)
