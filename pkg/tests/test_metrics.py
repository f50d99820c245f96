import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_asd, naive_counts, naive_hd, naive_metrics, naive_surface, random_label_pair

from rcaqc.metrics import (
    ALL_METRICS,
    OverlapCounts,
    QualityCategory,
    asd,
    categorize,
    evaluate_all,
    extract_surface,
    hausdorff,
    overlap_counts,
    overlap_metrics,
    reports_to_csv,
    reports_to_json,
    rvd,
)
from rcaqc.volume import LabelVolume


def _lv(a, ncls=3, spacing=(1.0, 1.0, 1.0)):
    return LabelVolume(a, spacing, ncls)


def test_overlap_counts_identity_and_empty(rng):
    a = rng.integers(0, 3, (8, 8, 8)).astype(np.uint8)
    c = overlap_counts(_lv(a), _lv(a), 1)
    assert c.fp == 0 and c.fn == 0
    ref = np.zeros((8, 8, 8), np.uint8)
    ref.flat[:10] = 1
    assert overlap_counts(_lv(np.zeros_like(ref)), _lv(ref), 1) == OverlapCounts(0, 0, 10)
    with pytest.raises(ValueError):
        overlap_counts(_lv(a), _lv(a), 3)


def test_overlap_counts_oracle(rng):
    for _ in range(5):
        a = rng.integers(0, 3, (8, 8, 8)).astype(np.uint8)
        b = rng.integers(0, 3, (8, 8, 8)).astype(np.uint8)
        for label in (1, 2):
            assert tuple(overlap_counts(_lv(a), _lv(b), label)) == naive_counts(a, b, label)


def test_overlap_metrics_examples():
    assert overlap_metrics(OverlapCounts(50, 0, 0)) == (1.0, 1.0, 1.0, 1.0)
    assert overlap_metrics(OverlapCounts(0, 10, 10)) == (0.0, 0.0, 0.0, 0.0)
    dsc, ji, pr, re = overlap_metrics(OverlapCounts(1, 1, 1))
    # the defining formulas give dsc = 2/4 and ji = 1/3 for these counts
    assert dsc == 0.5 and ji == pytest.approx(1 / 3) and pr == 0.5 and re == 0.5
    assert abs(ji - dsc / (2 - dsc)) < 1e-12


def test_surface_examples():
    single = np.zeros((5, 5, 5), np.uint8)
    single[2, 2, 2] = 1
    assert extract_surface(_lv(single), 1).tolist() == [[2.0, 2.0, 2.0]]
    cube = np.zeros((7, 7, 7), np.uint8)
    cube[2:5, 2:5, 2:5] = 1
    surf = extract_surface(_lv(cube), 1)
    assert len(surf) == 26
    assert [3.0, 3.0, 3.0] not in surf.tolist()
    assert len(extract_surface(_lv(np.zeros((4, 4, 4), np.uint8)), 1)) == 0


def test_surface_counts_grid_border():
    full = np.ones((3, 3, 3), np.uint8)
    # only the centre voxel is interior
    assert len(extract_surface(_lv(full), 1)) == 26


def test_surface_oracle_anisotropic(rng):
    a, _ = random_label_pair(rng, (9, 10, 11))
    sp = (0.7, 1.3, 2.0)
    got = extract_surface(_lv(a, spacing=sp), 2)
    want = naive_surface(a == 2, sp)
    assert sorted(map(tuple, got.round(9))) == sorted(map(tuple, want.round(9)))


def test_distance_examples():
    p = np.array([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])
    assert hausdorff(p, p) == 0.0
    assert hausdorff([[0, 0, 0]], [[3, 4, 0]]) == 5.0
    assert hausdorff(np.empty((0, 3)), p) == 150.0
    assert asd(p, p) == 0.0
    assert asd([[0, 0, 0]], [[2, 0, 0]]) == 2.0
    assert asd(np.empty((0, 3)), p) == 10.0
    assert hausdorff([[0, 0, 0]], [[500, 0, 0]]) == 150.0


def test_rvd_examples():
    assert rvd(100, 100) == 0.0
    assert rvd(150, 100) == 0.5
    assert rvd(300, 100) == 1.0
    assert rvd(5, 0) == 1.0


def test_evaluate_all_identity_and_empty():
    a = np.zeros((10, 10, 10), np.uint8)
    a[2:6, 2:6, 2:6] = 1
    a[6:9, 6:9, 6:9] = 2
    rep = evaluate_all(_lv(a), _lv(a))
    for label in (1, 2):
        r = rep[label]
        assert (r.dsc, r.ji, r.pr, r.re) == (1.0, 1.0, 1.0, 1.0)
        assert (r.hd_mm, r.asd_mm, r.rvd) == (0.0, 0.0, 0.0)
    rep = evaluate_all(_lv(np.zeros_like(a)), _lv(a))
    r = rep[1]
    assert (r.dsc, r.hd_mm, r.asd_mm, r.rvd) == (0.0, 150.0, 10.0, 1.0)
    assert r.empty_pred and not r.empty_ref


def test_both_empty_convention():
    z = np.zeros((4, 4, 4), np.uint8)
    r = evaluate_all(_lv(z), _lv(z))[1]
    assert (r.dsc, r.ji, r.pr, r.re, r.hd_mm, r.asd_mm, r.rvd) == (1, 1, 1, 1, 0, 0, 0)
    assert r.empty_pred and r.empty_ref


def test_evaluate_all_matches_oracle(rng):
    for _ in range(10):
        a, b = random_label_pair(rng, (8, 8, 8))
        rep = evaluate_all(_lv(a), _lv(b))
        for label in (1, 2):
            want = naive_metrics(a, b, label)
            got = rep[label]
            for m in ALL_METRICS:
                assert got.value(m) == pytest.approx(want[m], abs=1e-9), m


def test_symmetry_and_identities(rng):
    for _ in range(10):
        a, b = random_label_pair(rng, (10, 10, 10))
        ab, ba = evaluate_all(_lv(a), _lv(b)), evaluate_all(_lv(b), _lv(a))
        for label in (1, 2):
            x, y = ab[label], ba[label]
            assert x.dsc == y.dsc and x.hd_mm == pytest.approx(y.hd_mm) and x.asd_mm == pytest.approx(y.asd_mm)
            assert x.pr == pytest.approx(y.re, abs=1e-15)
            assert abs(x.ji - x.dsc / (2 - x.dsc)) < 1e-12
            if x.pr + x.re > 0:
                assert abs(x.dsc - 2 * x.pr * x.re / (x.pr + x.re)) < 1e-12


def test_spacing_covariance(rng):
    a, b = random_label_pair(rng, (10, 10, 10))
    r1 = evaluate_all(_lv(a), _lv(b))
    r2 = evaluate_all(_lv(a, spacing=(2, 2, 2)), _lv(b, spacing=(2, 2, 2)))
    for label in (1, 2):
        if r1[label].empty_pred or r1[label].empty_ref:
            continue
        assert r2[label].hd_mm == pytest.approx(min(2 * r1[label].hd_mm, 150))
        assert r2[label].asd_mm == pytest.approx(min(2 * r1[label].asd_mm, 10))
        assert r2[label].dsc == r1[label].dsc and r2[label].rvd == r1[label].rvd


def test_recall_non_increasing_under_erosion():
    from scipy import ndimage

    ref = np.zeros((16, 16, 16), np.uint8)
    ref[3:13, 3:13, 3:13] = 1
    pred = np.zeros_like(ref)
    pred[4:14, 3:13, 2:12] = 1
    last = 1.1
    mask = pred.astype(bool)
    while mask.any():
        re = evaluate_all(_lv(mask.astype(np.uint8), 2), _lv(ref, 2))[1].re
        assert re <= last
        last = re
        mask = ndimage.binary_erosion(mask)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(*[st.integers(0, 6)] * 3), min_size=1, max_size=8),
       st.lists(st.tuples(*[st.integers(0, 6)] * 3), min_size=1, max_size=8))
def test_point_distances_match_brute_force(a, b):
    a = np.array(a, float)
    b = np.array(b, float)
    assert hausdorff(a, b) == pytest.approx(naive_hd(a, b), abs=1e-9)
    assert asd(a, b) == pytest.approx(naive_asd(a, b), abs=1e-9)


@pytest.mark.parametrize(
    "score, metric, cat",
    [
        (0.85, "dsc", "good"),
        (0.6, "dsc", "medium"),
        (0.5999, "dsc", "bad"),
        (0.8, "ji", "good"),
        (60.0, "hd", "medium"),
        (10.0, "hd", "good"),
        (60.01, "hd", "bad"),
        (2.0, "asd", "good"),
        (5.0, "asd", "medium"),
        (5.5, "asd", "bad"),
        (0.2, "rvd", "good"),
        (0.3, "rvd", "medium"),
        (0.41, "rvd", "bad"),
    ],
)
def test_categorize(score, metric, cat):
    assert categorize(score, metric) == QualityCategory(cat)


def test_categorize_rejects_out_of_range_and_accepts_custom_edges():
    with pytest.raises(ValueError):
        categorize(1.2, "dsc")
    with pytest.raises(ValueError):
        categorize(151, "hd")
    assert categorize(0.65, "dsc", {"dsc": (0.5, 0.7)}) == QualityCategory.MEDIUM


def test_report_serialisation_columns():
    a = np.zeros((4, 4, 4), np.uint8)
    a[1:3, 1:3, 1:3] = 1
    rep = evaluate_all(_lv(a, 2), _lv(a, 2), case_id="c1")
    csv_text = reports_to_csv([rep])
    assert csv_text.splitlines()[0] == "id,label,dsc,ji,pr,re,hd_mm,asd_mm,rvd,empty_pred,empty_ref"
    assert csv_text.splitlines()[1].startswith("c1,1,1.0,")
    import json

    rows = json.loads(reports_to_json([rep]))
    assert list(rows[0]) == ["id", "label", "dsc", "ji", "pr", "re", "hd_mm", "asd_mm", "rvd", "empty_pred", "empty_ref"]
