import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bocf.evaluate import evaluate_arrays, evaluate_model, quartiles, rae, summarize
from bocf.imageio import DatasetManifest, ManifestEntry, save_image
from bocf.statistical import gray_world
from bocf.synth import GRAY, SceneSpec, generate_synthetic_scene

positive3 = st.tuples(*[st.floats(1e-3, 1e3)] * 3).map(np.array)
error_lists = st.lists(st.floats(0, 180), min_size=1, max_size=60)


class TestRae:
    def test_unit_cases(self):
        assert rae([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0
        assert abs(rae([1, 0, 0], [0, 1, 0]) - 90.0) < 1e-9
        assert abs(rae([1, 0, 0], [1, 1, 0]) - 45.0) < 1e-9

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            rae([0, 0, 0], [1, 1, 1])

    @settings(max_examples=200)
    @given(positive3, positive3, st.floats(1e-3, 1e3), st.permutations([0, 1, 2]))
    def test_properties(self, a, b, c, perm):
        e = rae(a, b)
        assert 0 <= e <= 180
        assert abs(rae(b, a) - e) < 1e-9
        assert abs(rae(c * a, b) - e) < 1e-6
        assert abs(rae(a[perm], b[perm]) - e) < 1e-9


class TestSummarize:
    def test_one_to_seven(self):
        assert quartiles(range(1, 8)) == (2.0, 4.0, 6.0)
        r = summarize(range(1, 8))
        assert r.median == 4 and r.trimean == 4 and r.mean == 4
        assert r.best25 == 1.5 and r.worst25 == 6.5  # ceil(7/4) = 2 elements

    def test_constant_and_single(self):
        for errs in ([2.5] * 9, [2.5]):
            r = summarize(errs)
            assert all(v == 2.5 for v in r.stats().values())

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize([])

    @settings(max_examples=300)
    @given(error_lists)
    def test_ordering(self, errs):
        r = summarize(errs)
        tol = 1e-9
        assert r.best25 <= r.median + tol and r.median <= r.worst25 + tol
        assert r.best25 <= r.mean + tol and r.mean <= r.worst25 + tol
        assert r.best25 <= r.trimean + tol and r.trimean <= r.worst25 + tol

    @settings(max_examples=100)
    @given(error_lists, st.randoms())
    def test_permutation_invariant(self, errs, rnd):
        shuffled = list(errs)
        rnd.shuffle(shuffled)
        a, b = summarize(errs).stats(), summarize(shuffled).stats()
        for k in a:
            assert math.isclose(a[k], b[k], rel_tol=1e-12, abs_tol=1e-12)

    def test_json_and_text_agree(self):
        r = summarize([0.123456789, 3.3, 7.25, 1.0])
        d = r.to_json_dict()
        text = r.format_text()
        for k in ("best25", "mean", "median", "trimean", "worst25"):
            assert f"{d[k]:.6f}" in text
        assert d["n"] == 4


def test_perfect_oracle():
    gts = [np.array([0.2, 0.3, 0.5]), np.array([0.5, 0.4, 0.1])]
    images = [np.broadcast_to(g, (4, 4, 3)) for g in gts]
    r = evaluate_arrays(lambda img: img[0, 0], images, gts)
    assert all(v == 0 for v in r.stats().values())


def test_gray_world_uniform_scenes():
    scenes = [generate_synthetic_scene(SceneSpec(1, palette=GRAY, seed=s), [0.3 + 0.1 * s, 0.6, 0.4], 16) for s in range(5)]
    r = evaluate_arrays(gray_world, [s[0] for s in scenes], [s[1] for s in scenes])
    assert r.mean < 1e-6 and r.worst25 < 1e-6


def test_evaluate_manifest_with_failures(tmp_path):
    entries = []
    for i in range(3):
        img, gt = generate_synthetic_scene(SceneSpec(1, palette=GRAY, seed=i), [0.4, 0.5 + 0.1 * i, 0.3], 16)
        save_image(tmp_path / f"{i}.png", img)
        entries.append(ManifestEntry(tmp_path / f"{i}.png", gt))
    (tmp_path / "broken.png").write_bytes(b"not a png")
    entries.append(ManifestEntry(tmp_path / "broken.png", np.ones(3)))
    r = evaluate_model(gray_world, DatasetManifest(tmp_path, entries))
    assert r.n == 3
    assert len(r.failures) == 1 and "broken.png" in r.failures[0][0]
    assert r.worst25 < 1e-2  # 16-bit quantization only
    out = tmp_path / "errs.csv"
    r.write_errors_csv(out)
    assert out.read_text().splitlines()[0] == "path,error_deg"
    assert len(out.read_text().splitlines()) == 4
