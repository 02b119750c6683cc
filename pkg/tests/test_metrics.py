import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stereo_spixel.core import StereoPair, ValidationError
from stereo_spixel.metrics import (asa, benchmark, boundary_map, br, default_tolerance,
                                   read_results_csv, ue)

from oracles import asa_brute, boundary_brute, br_brute, ue_brute

label_maps = arrays(np.int64, (6, 6), elements=st.integers(0, 4))


def sixty_forty():
    g = np.zeros((10, 10), dtype=np.int64)
    g[6:] = 1  # 60 / 40 pixels
    return np.zeros_like(g), g


def test_asa_single_superpixel_sixty_forty():
    s, g = sixty_forty()
    assert asa(s, g) == 0.6


def test_ue_single_superpixel_sixty_forty():
    s, g = sixty_forty()
    expected = 0.5 * ((100 - 60) / 60 + (100 - 40) / 40)
    assert ue(s, g) == pytest.approx(expected, abs=1e-15)
    assert ue(s, g) == pytest.approx(1.0833333333333333, abs=1e-12)


def test_perfect_partition():
    g = np.repeat(np.arange(4), 9).reshape(6, 6)
    assert asa(g, g) == 1.0
    assert ue(g, g) == 0.0
    assert br(g, g, 0) == 1.0


def test_nested_superpixels_have_no_leakage(rng):
    g = np.zeros((6, 6), dtype=np.int64)
    g[:, 3:] = 1
    s = np.arange(36).reshape(6, 6)  # every pixel its own superpixel
    assert ue(s, g) == 0.0
    assert asa(s, g) == 1.0


def test_br_no_superpixel_boundaries():
    s, g = sixty_forty()
    assert br(s, g, 0) == 0.0


def test_br_without_gt_boundaries_is_one():
    g = np.zeros((5, 5), dtype=np.int64)
    assert br(np.arange(25).reshape(5, 5), g, 0) == 1.0


def test_br_offset_by_one():
    g = np.zeros((6, 6), dtype=np.int64)
    g[:, 3:] = 1
    s = np.zeros_like(g)
    s[:, 4:] = 1
    assert br(s, g, 1) == 1.0
    assert br(s, g, 0) == br_brute(s, g, 0)
    assert br(s, g, 0) == 0.5


@pytest.mark.parametrize("trial", range(20))
def test_random_6x6_against_oracles(trial):
    rng = np.random.default_rng(trial)
    s = rng.integers(0, 6, (6, 6))
    g = rng.integers(0, 3, (6, 6))
    assert abs(asa(s, g) - asa_brute(s, g)) < 1e-12
    assert abs(ue(s, g) - ue_brute(s, g)) < 1e-12
    for r in (0, 1, 2):
        assert abs(br(s, g, r) - br_brute(s, g, r)) < 1e-12


def test_boundary_map_matches_loops(rng):
    labels = rng.integers(0, 3, (7, 5))
    np.testing.assert_array_equal(boundary_map(labels), boundary_brute(labels))


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        asa(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValidationError):
        ue(np.zeros((2, 2), int), np.zeros((3, 2), int))


def test_pixel_normalized_ue():
    s, g = sixty_forty()
    assert ue(s, g, normalize="pixels") == pytest.approx((40 + 60) / 100)


def test_default_tolerance():
    assert default_tolerance(64, 64) == 1
    assert default_tolerance(375, 1242) == max(1, round(0.0025 * math.hypot(375, 1242)))


@settings(max_examples=60, deadline=None)
@given(label_maps, label_maps, st.permutations(range(5)))
def test_metrics_invariant_to_label_permutation(s, g, perm):
    s2 = np.asarray(perm)[s]
    assert asa(s2, g) == asa(s, g)
    assert ue(s2, g) == ue(s, g)
    assert br(s2, g, 1) == br(s, g, 1)


@settings(max_examples=60, deadline=None)
@given(label_maps, label_maps, st.integers(0, 4), st.integers(0, 2))
def test_refinement_never_decreases_asa_or_br(s, g, target, r):
    # split superpixel `target` by giving its right half a fresh id
    refined = s.copy()
    mask = s == target
    mask[:, :3] = False
    refined[mask] = 99
    assert asa(refined, g) >= asa(s, g) - 1e-15
    assert br(refined, g, r) >= br(s, g, r)


@settings(max_examples=60, deadline=None)
@given(label_maps, label_maps)
def test_metric_ranges(s, g):
    assert 0.0 <= asa(s, g) <= 1.0
    assert 0.0 <= br(s, g, 1) <= 1.0
    assert ue(s, g) >= 0.0


def _samples(rng, n=5):
    out = []
    for i in range(n):
        g = rng.integers(0, 3, (8, 8))
        out.append(StereoPair(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), g, f"s{i}"))
    return out


def test_benchmark_identity_curve(tmp_path, rng):
    samples = _samples(rng)
    res = benchmark(lambda smp, n: smp.label, samples, [4, 9, 16], name="oracle",
                    r=1, out_csv=tmp_path / "r.csv", plot_dir=tmp_path / "plots")
    rows = read_results_csv(tmp_path / "r.csv")
    assert len(rows) == 3
    for row in rows:
        assert (row["asa"], row["ue"], row["br"]) == (1.0, 0.0, 1.0)
    assert {p.name for p in (tmp_path / "plots").iterdir()} == {"asa.png", "ue.png", "br.png"}
    assert res.rows[4]["n_images"] == 5


def test_benchmark_means_are_arithmetic_means(rng):
    samples = _samples(rng, 6)
    preds = {s.id: rng.integers(0, 4, (8, 8)) for s in samples}
    res = benchmark(lambda smp, n: preds[smp.id], samples, [4], r=1)
    per = [asa(preds[s.id], s.label) for s in samples]
    assert abs(res.rows[4]["asa"] - sum(per) / len(per)) < 1e-12
    per_ue = [ue(preds[s.id], s.label) for s in samples]
    assert abs(res.rows[4]["ue"] - sum(per_ue) / len(per_ue)) < 1e-12


def test_benchmark_skips_missing(rng):
    samples = _samples(rng, 3)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = benchmark(lambda smp, n: None if smp.id == "s1" else smp.label, samples, [4])
    assert res.rows[4]["n_images"] == 2
    assert any("s1" in str(w.message) for w in caught)
