import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppltape.data import (make_gmm, make_logreg, read_csv, separated_means, spawn_rngs,
                          truth_path, write_csv, write_truth)
from ppltape.errors import ConfigError

finite = st.floats(-1e300, 1e300, allow_nan=False)


class TestCSV:
    @settings(max_examples=30, deadline=None)
    @given(X=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=finite))
    def test_round_trip_is_exact(self, tmp_path_factory, X):
        path = tmp_path_factory.mktemp("csv") / "d.csv"
        y = X[:, 0] * 0.5
        write_csv(path, X, y)
        X2, y2 = read_csv(path)
        np.testing.assert_array_equal(X2, X)
        np.testing.assert_array_equal(y2, y)

    def test_unlabelled(self, tmp_path):
        path = tmp_path / "u.csv"
        write_csv(path, np.eye(2))
        X, y = read_csv(path, has_label=False)
        assert y is None and X.shape == (2, 2)
        assert path.read_text().splitlines()[0] == "x0,x1"

    @pytest.mark.parametrize("text,match", [
        ("", "empty file"),
        ("a,b\n1,2\n3\n", ":3: expected 2 columns"),
        ("a,b\n1,oops\n", ":2: non-numeric"),
        ("a,b\n", "no data rows"),
    ])
    def test_malformed(self, tmp_path, text, match):
        path = tmp_path / "bad.csv"
        path.write_text(text)
        with pytest.raises(ConfigError, match=match):
            read_csv(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "b.csv"
        path.write_text("a,b\n1,2\n\n3,4\n")
        X, y = read_csv(path)
        np.testing.assert_array_equal(y, [2.0, 4.0])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_csv(tmp_path / "absent.csv")


class TestGenerators:
    @pytest.mark.parametrize("k,d", [(3, 2), (5, 2), (4, 3)])
    def test_means_separated(self, k, d):
        means = separated_means(k, d, np.random.default_rng(0))
        assert means.shape == (k, d)
        assert min(np.linalg.norm(a - b) for a, b in combinations(means, 2)) >= 6.0

    def test_box_grows_when_crowded(self):
        means = separated_means(6, 1, np.random.default_rng(1), box=5.0, max_tries=20)
        assert np.min(np.diff(np.sort(means[:, 0]))) >= 6.0

    def test_gmm(self):
        a, b = make_gmm(100, 3, 2, seed=2), make_gmm(100, 3, 2, seed=2)
        np.testing.assert_array_equal(a["X"], b["X"])
        assert a["X"].shape == (100, 2) and set(np.unique(a["y"])) <= {0.0, 1.0, 2.0}
        assert np.array(a["truth"]["means"]).shape == (3, 2)

    def test_logreg(self):
        data = make_logreg(4000, 3, seed=3)
        assert data["X"].shape == (4000, 3) and set(np.unique(data["y"])) == {0.0, 1.0}
        beta = np.array(data["truth"]["beta"])
        p = 1 / (1 + np.exp(-data["X"] @ beta))
        # labels follow the recorded coefficients: mean residual within 4 standard errors
        assert abs(np.mean(data["y"] - p)) <= 4 * np.sqrt(np.mean(p * (1 - p)) / 4000)
        with pytest.raises(ConfigError):
            make_logreg(0, 3)
        with pytest.raises(ConfigError):
            make_gmm(10, 0, 2)


class TestSeeds:
    def test_spawn_deterministic_and_distinct(self):
        a = [r.random(3) for r in spawn_rngs(7, 3)]
        b = [r.random(3) for r in spawn_rngs(7, 3)]
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a[0], a[1])

    def test_truth_file(self, tmp_path):
        path = tmp_path / "run.csv"
        assert truth_path(path) == tmp_path / "run.truth.json"
        out = write_truth(path, {"b": 1, "a": [2.0]})
        assert json.loads(out.read_text()) == {"a": [2.0], "b": 1}
