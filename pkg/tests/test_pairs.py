import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hirsute.dataset import ImageRecord, build_dataset
from hirsute.pairs import (
    PairCategory,
    PairSpec,
    RatioClassScheme,
    categorize_pair,
    class_membership,
    classify,
    enumerate_pairs,
)

ratios = st.floats(0.0, 1.0, allow_nan=False)


def test_classify_published_examples():
    assert classify(0.0005) == {"cl"}
    assert classify(0.12) == {"fh_L1"}
    assert classify(0.17) == {"fh_L1", "fh_L2"}


def test_classify_boundaries_lower_inclusive():
    assert classify(0.001) == {"fh_S"}
    assert classify(0.1) == {"fh_L1"}
    assert classify(0.15) == {"fh_L1", "fh_L2"}


def test_classify_out_of_range():
    with pytest.raises(ValueError):
        classify(-0.1)
    with pytest.raises(ValueError):
        classify(1.01)


@given(ratios)
def test_classify_partition(r):
    classes = classify(r)
    assert len(classes & {"cl", "fh_S", "fh_L1"}) == 1
    if "fh_L2" in classes:
        assert "fh_L1" in classes


@given(st.lists(ratios, min_size=1, max_size=50))
@settings(max_examples=50, deadline=None)
def test_class_membership_matches_classify(values)  :
    member = class_membership(np.array(values))
    for i, r in enumerate(values):
        expected = classify(r)
        got = {name for name in member if member[name][i]}
        assert got == expected


def test_scheme_validation():
    with pytest.raises(ValueError):
        RatioClassScheme(cl_max=0.2, fh_s_max=0.1)
    custom = RatioClassScheme(cl_max=0.01, fh_s_max=0.2, fh_l2_min=0.3)
    assert classify(0.05, custom) == {"fh_S"}


def test_category_symmetric_and_parse():
    assert PairCategory.of("fh_L1", "cl") == PairCategory.of("cl", "fh_L1")
    assert PairCategory.of("fh_L1", "cl").name == "cl_vs_fh_L1"
    assert PairCategory.parse("fh_L2_vs_fh_L2").name == "fh_L2_vs_fh_L2"
    with pytest.raises(ValueError, match="unknown"):
        PairCategory.parse("cl_vs_beard")
    with pytest.raises(ValueError, match="parse"):
        PairCategory.parse("justone")


def test_categorize_pair_examples():
    assert categorize_pair(0.0005, 0.0003, PairCategory.parse("cl_vs_cl"))
    assert categorize_pair(0.16, 0.2, PairCategory.parse("fh_L2_vs_fh_L2"))
    # 0.05 classifies as fh_S, so the pair cannot be cl_vs_fh_L1
    assert not categorize_pair(0.05, 0.2, PairCategory.parse("cl_vs_fh_L1"))
    assert categorize_pair(0.0005, 0.2, PairCategory.parse("cl_vs_fh_L1"))
    assert categorize_pair(0.0005, 0.2, PairCategory.parse("cl_vs_fh_L2"))


@given(ratios, ratios, st.sampled_from([
    "cl_vs_cl", "cl_vs_fh_S", "cl_vs_fh_L1", "cl_vs_fh_L2",
    "fh_S_vs_fh_S", "fh_S_vs_fh_L1", "fh_L1_vs_fh_L1",
    "fh_L1_vs_fh_L2", "fh_L2_vs_fh_L2",
]))
def test_categorize_symmetry_and_containment(a, b, name):
    target = PairCategory.parse(name)
    assert categorize_pair(a, b, target) == categorize_pair(b, a, target)
    if categorize_pair(a, b, PairCategory.parse("fh_L2_vs_fh_L2")):
        assert categorize_pair(a, b, PairCategory.parse("fh_L1_vs_fh_L1"))


def make_ds(spec):
    """spec: list of (subject, n_images, demographic, ratio)."""
    records = []
    i = 0
    for subject, n, demo, ratio in spec:
        for _ in range(n):
            records.append(ImageRecord(f"i{i:03d}", subject, demo, i, facial_hair_ratio=ratio))
            i += 1
    return build_dataset(records)


def test_enumerate_counts_single_subject():
    ds = make_ds([("s1", 3, "CM", 0.0)])
    assert len(list(enumerate_pairs(ds, PairSpec(kind="genuine")))) == 3
    assert len(list(enumerate_pairs(ds, PairSpec(kind="impostor")))) == 0


def test_enumerate_counts_two_singletons():
    ds = make_ds([("s1", 1, "CM", 0.0), ("s2", 1, "CM", 0.0)])
    assert len(list(enumerate_pairs(ds, PairSpec(kind="genuine")))) == 0
    assert len(list(enumerate_pairs(ds, PairSpec(kind="impostor")))) == 1


def brute_force_pairs(records, kind):
    out = set()
    for a, b in itertools.combinations(records, 2):
        genuine = a.subject_id == b.subject_id
        if genuine == (kind == "genuine"):
            out.add(frozenset((a.image_id, b.image_id)))
    return out


@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 3)), min_size=1, max_size=20),
       st.sampled_from(["genuine", "impostor"]))
@settings(max_examples=40, deadline=None)
def test_enumerate_matches_brute_force(spec, kind):
    ds = make_ds([(f"s{subj}", n, "CM", 0.0) for subj, n in spec])
    got = {frozenset((a.image_id, b.image_id))
           for a, b in enumerate_pairs(ds, PairSpec(kind=kind))}
    assert got == brute_force_pairs(ds.records, kind)


def test_pair_count_formulas():
    # random 100-image subsample shape: counts obey the combinatorial identities
    rng = np.random.default_rng(7)
    sizes = rng.integers(1, 6, size=30)
    ds = make_ds([(f"s{i}", int(n), "CM", 0.0) for i, n in enumerate(sizes)])
    n_images = len(ds.records)
    genuine = sum(1 for _ in enumerate_pairs(ds, PairSpec(kind="genuine")))
    impostor = sum(1 for _ in enumerate_pairs(ds, PairSpec(kind="impostor")))
    assert genuine == sum(int(n) * (int(n) - 1) // 2 for n in sizes)
    assert genuine + impostor == n_images * (n_images - 1) // 2


def test_enumerate_order_deterministic_and_sorted():
    ds = make_ds([("s2", 2, "CM", 0.0), ("s1", 2, "CM", 0.0)])
    pairs = [(a.image_id, b.image_id) for a, b in enumerate_pairs(ds, PairSpec(kind="impostor"))]
    assert pairs == sorted(pairs)
    assert all(a < b for a, b in pairs)
    assert pairs == [(a.image_id, b.image_id)
                     for a, b in enumerate_pairs(ds, PairSpec(kind="impostor"))]


def test_enumerate_scope_filters_demographic():
    ds = make_ds([("s1", 2, "AAM", 0.0), ("s2", 2, "CM", 0.0)])
    pairs = list(enumerate_pairs(ds, PairSpec(kind="impostor", scope="AAM")))
    assert pairs == []  # only one AAM subject
    genuine = list(enumerate_pairs(ds, PairSpec(kind="genuine", scope="AAM")))
    assert len(genuine) == 1
    assert all(r.demographic == "AAM" for pair in genuine for r in pair)


def test_enumerate_category_filter():
    ds = make_ds([("s1", 2, "CM", 0.0), ("s2", 2, "CM", 0.2)])
    spec = PairSpec(kind="impostor", category=PairCategory.parse("cl_vs_fh_L1"))
    pairs = list(enumerate_pairs(ds, spec))
    assert len(pairs) == 4  # every cross-subject pair mixes cl with fh_L1
    spec_cc = PairSpec(kind="impostor", category=PairCategory.parse("cl_vs_cl"))
    assert len(list(enumerate_pairs(ds, spec_cc))) == 0
