import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsbn.data import (
    LabeledDataset,
    accuracy_metrics,
    evaluate_transductive,
    make_multi_source_blobs,
    make_shifted_blobs,
    merge_sources,
    per_domain_batches,
    read_csv,
    simplex_vertices,
    write_csv,
)
from dsbn.errors import ConfigurationError
from dsbn.layers import build_mlp
from dsbn.normalization import DomainId, convert_bn_to_dsbn, normalization_layers
from dsbn.optim import Adam
from dsbn.tensor import backward, softmax_cross_entropy


def nearest_center(x, centers):
    return np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)


class TestSimplex:
    @pytest.mark.parametrize("classes,dims", [(2, 2), (3, 2), (4, 3), (5, 6)])
    def test_regular(self, classes, dims):
        v = simplex_vertices(classes, dims, radius=2.0)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 2.0, rtol=1e-12)
        np.testing.assert_allclose(v.sum(axis=0), 0.0, atol=1e-12)
        d = np.linalg.norm(v[:, None] - v[None], axis=-1)[np.triu_indices(classes, 1)]
        np.testing.assert_allclose(d, d[0], rtol=1e-12)

    def test_too_few_dims(self):
        with pytest.raises(ConfigurationError):
            simplex_vertices(4, 2)


class TestShiftedBlobs:
    def test_shapes_and_balance(self):
        src, tgt = make_shifted_blobs(3, 2, 50, [1.0, 0.0], 0.3, seed=0)
        assert len(src) == len(tgt) == 150
        np.testing.assert_array_equal(src.class_counts(), [50, 50, 50])
        np.testing.assert_array_equal(tgt.class_counts(), src.class_counts())
        assert src.domain == DomainId.source(0) and tgt.domain.is_target

    def test_seeded(self):
        a = make_shifted_blobs(3, 2, 20, [1.0, 0.5], 0.4, seed=7)
        b = make_shifted_blobs(3, 2, 20, [1.0, 0.5], 0.4, seed=7)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.features, y.features)

    def test_target_cluster_means_follow_transform(self):
        src, tgt = make_shifted_blobs(3, 2, 4000, [1.5, -0.5], math.radians(50), noise=0.2, seed=1)
        c, s = math.cos(math.radians(50)), math.sin(math.radians(50))
        centers = simplex_vertices(3, 2) @ np.array([[c, -s], [s, c]]).T + [1.5, -0.5]
        for k in range(3):
            np.testing.assert_allclose(tgt.features[tgt.labels == k].mean(0), centers[k], atol=0.02)

    def test_no_shift_matches_source(self):
        src, tgt = make_shifted_blobs(3, 2, 300, None, 0.0, noise=0.35, seed=2)
        rng = np.random.default_rng(0)
        net = build_mlp(2, [16], 3, rng)
        opt = Adam(net.parameters())
        for _ in range(300):
            idx = rng.choice(len(src), 60, replace=False)
            backward(softmax_cross_entropy(net(src.features[idx]), src.labels[idx]))
            opt.step(1e-2)
            opt.zero_grad()
        acc_s = evaluate_transductive(net, src).mean_per_class
        acc_t = evaluate_transductive(net, tgt).mean_per_class
        oracle = 100 * np.mean(nearest_center(tgt.features, simplex_vertices(3, 2)) == tgt.labels)
        assert abs(acc_t - acc_s) < 3.0
        assert abs(acc_t - oracle) < 3.0

    def test_half_turn_swaps_two_classes(self):
        sigma, n = 0.35, 20000
        src, tgt = make_shifted_blobs(2, 2, n, None, math.pi, noise=sigma, seed=3)
        pred = nearest_center(tgt.features, simplex_vertices(2, 2))
        acc = accuracy_metrics(pred, tgt.labels, 2).mean_per_class
        # a point is classified correctly only if noise carries it across the origin
        closed_form = 100 * 0.5 * math.erfc((1.0 / sigma) / math.sqrt(2))
        assert abs(acc - closed_form) < 4 * 100 * math.sqrt(closed_form / 100 / (2 * n)) + 1e-9
        assert acc <= 50.0

    def test_degenerate(self):
        with pytest.raises(ConfigurationError):
            make_shifted_blobs(3, 2, 0)
        with pytest.raises(ConfigurationError):
            make_shifted_blobs(3, 2, 10, noise=-1.0)
        with pytest.raises(ConfigurationError):
            make_shifted_blobs(1, 2, 10)
        with pytest.raises(ConfigurationError):
            make_shifted_blobs(3, 2, 10, shift=[1.0, 2.0, 3.0])


class TestMultiSource:
    def setup_method(self):
        self.sources, self.target = make_multi_source_blobs(
            2, [[0, 0], [1.0, 0.0]], [0.0, 0.4], [1.5, 0.0], 0.9, n_per_class=40, seed=0
        )

    def test_domains(self):
        assert [s.domain for s in self.sources] == [DomainId.source(0), DomainId.source(1)]

    def test_merged_counts(self):
        merged = merge_sources(self.sources)
        assert len(merged) == sum(len(s) for s in self.sources) == 240
        assert merged.domain == DomainId.source(0)

    def test_merged_multiset(self):
        merged = merge_sources(self.sources)
        as_rows = lambda xs, ys: Counter((tuple(x), int(y)) for x, y in zip(xs, ys))
        separate = sum((as_rows(s.features, s.labels) for s in self.sources), Counter())
        assert as_rows(merged.features, merged.labels) == separate

    def test_separate_gives_one_branch_per_domain(self):
        net = convert_bn_to_dsbn(build_mlp(2, [8], 3, np.random.default_rng(0)), [s.domain for s in self.sources] + [self.target.domain])
        (layer,) = normalization_layers(net)
        assert len(layer.branches) == len(self.sources) + 1

    def test_mismatched_lengths(self):
        with pytest.raises(ConfigurationError):
            make_multi_source_blobs(2, [[0, 0]], [0.0, 0.0])


class TestBatches:
    def _data(self):
        src, tgt = make_shifted_blobs(3, 2, 30, [1.0, 0.0], 0.2, seed=0)
        return src, tgt

    def test_alternating_single_domain(self):
        src, tgt = self._data()
        stream = per_domain_batches([src, tgt], 40, np.random.default_rng(0))
        for i in range(10):
            b = next(stream)
            assert len(b) == 40
            assert b.domain == (src.domain if i % 2 == 0 else tgt.domain)
            np.testing.assert_array_equal(b.features, (src if i % 2 == 0 else tgt).features[b.ids])

    def test_target_labels_withheld(self):
        src, tgt = self._data()
        stream = per_domain_batches([src, tgt], 10, 0)
        assert next(stream).labels is not None and next(stream).labels is None

    def test_epoch_drop_last(self):
        src, _ = self._data()
        stream = per_domain_batches([src], 40, 1)
        ids = np.concatenate([next(stream).ids for _ in range(90 // 40)])
        assert len(ids) == 80 and len(set(ids.tolist())) == 80

    def test_seeded(self):
        src, tgt = self._data()
        a = per_domain_batches([src, tgt], 16, np.random.default_rng(3))
        b = per_domain_batches([src, tgt], 16, np.random.default_rng(3))
        for _ in range(20):
            np.testing.assert_array_equal(next(a).ids, next(b).ids)

    def test_errors(self):
        src, _ = self._data()
        with pytest.raises(ConfigurationError):
            next(per_domain_batches([src], 1, 0))
        with pytest.raises(ConfigurationError):
            next(per_domain_batches([src], 91, 0))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 1000))
    def test_never_mixes_domains(self, batch, seed):
        src, tgt = self._data()
        stream = per_domain_batches([src, tgt], batch, seed)
        for i in range(7):
            b = next(stream)
            assert b.domain == (src, tgt)[i % 2].domain and len(b) == batch


class TestMetrics:
    def test_perfect(self):
        y = np.array([0, 1, 2, 2, 1])
        m = accuracy_metrics(y, y, 3)
        np.testing.assert_array_equal(m.per_class, 100.0)
        assert m.mean_per_class == 100.0 and m.overall == 100.0

    @pytest.mark.parametrize("classes", [2, 3, 5])
    def test_constant_predictor(self, classes):
        y = np.repeat(np.arange(classes), 7)
        m = accuracy_metrics(np.zeros_like(y), y, classes)
        assert m.mean_per_class == pytest.approx(100.0 / classes, abs=1e-12)

    def test_mean_per_class_differs_from_overall_when_unbalanced(self):
        y = np.array([0, 0, 0, 1])
        m = accuracy_metrics(np.zeros(4, dtype=int), y, 2)
        assert m.mean_per_class == 50.0 and m.overall == 75.0

    def test_report_shape(self):
        d = accuracy_metrics(np.array([0, 1]), np.array([0, 0]), 3).as_dict()
        assert set(d) == {"per_class", "avg", "overall"} and len(d["per_class"]) == 3

    def test_evaluation_leaves_statistics(self):
        src, tgt = make_shifted_blobs(3, 2, 20, [1.0, 0.0], 0.2, seed=0)
        net = convert_bn_to_dsbn(build_mlp(2, [8], 3, np.random.default_rng(0)), [src.domain, tgt.domain])
        net(src.features, src.domain, True)
        net(tgt.features, tgt.domain, True)
        (layer,) = normalization_layers(net)
        before = {d: (s.running_mean.copy(), s.running_var.copy()) for d, s in layer.branches.items()}
        evaluate_transductive(net, tgt)
        for d, s in layer.branches.items():
            np.testing.assert_array_equal(s.running_mean, before[d][0])
            np.testing.assert_array_equal(s.running_var, before[d][1])


class TestCsv:
    def test_round_trip(self, tmp_path):
        src, tgt = make_shifted_blobs(3, 2, 10, [1.0, 0.0], 0.2, seed=0)
        write_csv([src, tgt], tmp_path / "d.csv")
        back = read_csv(tmp_path / "d.csv", 3)
        assert [b.domain for b in back] == [src.domain, tgt.domain]
        for orig, b in zip((src, tgt), back):
            np.testing.assert_array_equal(orig.features, b.features)
            np.testing.assert_array_equal(orig.labels, b.labels)

    def test_header(self, tmp_path):
        src, _ = make_shifted_blobs(3, 2, 2, seed=0)
        write_csv([src], tmp_path / "d.csv")
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x0,x1,label,domain"

    def test_bad_labels(self):
        with pytest.raises(ConfigurationError):
            LabeledDataset(np.zeros((2, 2)), [0, 3], DomainId.target(), 3)
