import numpy as np
import numpy.testing as npt
import pytest

from graphstruct import gcn, graphgen, numcore as nc
from graphstruct.gcn import (DropoutMasks, GcnError, GcnParams, LabeledSplit,
                             LossConfig)
from graphstruct.graphgen import EdgeDistribution
from graphstruct.numcore import Rng, SparseMatrix, Tape

from conftest import small_instance


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        p, m = x.copy(), x.copy()
        p[i] += h
        m[i] -= h
        g[i] = (f(p) - f(m)) / (2 * h)
    return g


def normalized(a):
    return graphgen.normalize_adjacency(SparseMatrix.from_dense(a))


class TestSplit:
    def test_overlapping_masks_rejected(self):
        with pytest.raises(GcnError):
            LabeledSplit(np.zeros(4, dtype=int), [0, 1], [1], [2], [3])

    def test_test_label_counter(self):
        s = LabeledSplit(np.array([0, 1, 0, 1]), [0], [1], [2], [3])
        assert s.test_label_reads == 0
        s.labels_for("train")
        s.labels_for("val_a")
        assert s.test_label_reads == 0
        s.labels_for("test")
        s.labels_for("test")
        assert s.test_label_reads == 2

    def test_one_hot(self):
        s = LabeledSplit(np.array([2, 0, 1]), [0, 2], [], [], [1])
        y = s.one_hot("train")
        npt.assert_array_equal(y, [[0, 0, 1], [0, 0, 0], [0, 1, 0]])

    def test_val_is_concat_of_a_and_b(self):
        s = LabeledSplit(np.array([0, 1, 0, 1, 0]), [0], [1], [2, 3], [4])
        npt.assert_array_equal(np.sort(s.mask("val")), [1, 2, 3])


class TestForward:
    def test_rows_are_distributions(self):
        x, _, _, params, a = small_instance(0)
        p = gcn.forward_np(params, x, normalized(a).to_csr())
        assert np.all(p >= 0)
        npt.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_isolated_nodes_identical_output(self):
        # with an empty graph every node's logits depend only on its own
        # features, so equal feature rows give equal outputs
        x = np.zeros((3, 4))
        x[0] = x[2] = [1.0, -2.0, 0.5, 3.0]
        params = GcnParams.init(4, 5, 3, Rng(1))
        p = gcn.forward_np(params, x, normalized(np.zeros((3, 3))).to_csr())
        npt.assert_allclose(p[0], p[2], atol=1e-12)

    def test_per_node_aggregation_oracle(self):
        # rebuild the two-layer propagation node by node with explicit loops
        x, _, _, params, a = small_instance(3)
        ah = normalized(a).densify()
        n = x.shape[0]

        def agg(m):
            out = np.zeros((n, m.shape[1]))
            for i in range(n):
                for j in range(n):
                    out[i] += ah[i, j] * m[j]
            return out

        h = np.maximum(agg(x @ params.w1), 0.0)
        z = agg(h @ params.w2)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        oracle = e / e.sum(axis=1, keepdims=True)
        npt.assert_allclose(gcn.forward_np(params, x, normalized(a).to_csr()),
                            oracle, atol=1e-12)

    def test_taped_forward_matches_numpy(self):
        x, _, _, params, a = small_instance(4)
        ah = normalized(a)
        with Tape():
            p = gcn.forward((nc.leaf(params.w1), nc.leaf(params.w2)), x, ah)
        npt.assert_allclose(p.value, gcn.forward_np(params, x, ah.to_csr()),
                            atol=1e-12)


class TestDropout:
    def test_masks_preserve_expectation(self):
        beta = 0.5
        m = DropoutMasks.draw(200, 50, 30, beta, Rng(2))
        vals = set(np.unique(m.x_mask).tolist())
        assert vals <= {0.0, 1.0 / (1.0 - beta)}
        assert abs(m.x_mask.mean() - 1.0) < 0.02
        assert abs(m.h_mask.mean() - 1.0) < 0.03

    def test_beta_zero_is_identity(self):
        m = DropoutMasks.draw(5, 3, 4, 0.0, Rng(0))
        npt.assert_array_equal(m.x_mask, np.ones((5, 3)))


class TestLosses:
    def test_uniform_logits_give_log_c(self):
        # zero weights -> uniform softmax -> loss is n_train * ln(C)
        x, _, split, params, a = small_instance(5)
        params = GcnParams(np.zeros_like(params.w1), np.zeros_like(params.w2))
        with Tape():
            loss = gcn.inner_loss((nc.leaf(params.w1), nc.leaf(params.w2)), x,
                                  normalized(a), split, LossConfig(rho=0.0))
        n_train = len(split.train_mask)
        npt.assert_allclose(loss.value.item(), n_train * np.log(3), atol=1e-12)

    def test_two_class_ln2_case(self):
        # single train node with logits (0, 0): loss = ln 2
        x = np.array([[0.0]])
        split = LabeledSplit(np.array([1]), [0], [], [], [])
        params = GcnParams(np.zeros((1, 2)), np.zeros((2, 2)))
        with Tape():
            loss = gcn.inner_loss((nc.leaf(params.w1), nc.leaf(params.w2)), x,
                                  normalized(np.zeros((1, 1))), split,
                                  LossConfig(rho=0.0))
        npt.assert_allclose(loss.value.item(), np.log(2.0), atol=1e-14)

    def test_regularizer_term(self):
        x, _, split, params, a = small_instance(6)
        rho = 0.37

        def loss_at(r):
            with Tape():
                return gcn.inner_loss(
                    (nc.leaf(params.w1), nc.leaf(params.w2)), x, normalized(a),
                    split, LossConfig(rho=r)).value.item()

        npt.assert_allclose(loss_at(rho) - loss_at(0.0),
                            rho * (params.w1 ** 2).sum(), rtol=1e-12)

    def test_outer_equals_inner_without_regularizer(self):
        # the validation objective is the same cross-entropy, evaluated on a
        # different mask with rho = 0 and no dropout
        x, labels, _, params, a = small_instance(7)
        split = LabeledSplit(labels, np.arange(4), np.arange(4, 8), [], [])
        swapped = LabeledSplit(labels, np.arange(4, 8), np.arange(4), [], [])
        with Tape():
            w = (nc.leaf(params.w1), nc.leaf(params.w2))
            o = gcn.outer_loss(w, x, normalized(a), split, "val_a")
            i = gcn.inner_loss(w, x, normalized(a), swapped, LossConfig(rho=0.0))
        npt.assert_allclose(o.value, i.value, atol=1e-12)

    def test_weight_gradients_match_finite_differences(self):
        x, _, split, params, a = small_instance(8)
        ah = normalized(a)
        cfg = LossConfig(rho=5e-4)

        for which in ("w1", "w2"):
            def f(wv):
                p = GcnParams(wv if which == "w1" else params.w1,
                              wv if which == "w2" else params.w2)
                with Tape():
                    return gcn.inner_loss((nc.leaf(p.w1), nc.leaf(p.w2)), x, ah,
                                          split, cfg).value.item()

            with Tape():
                w1, w2 = nc.leaf(params.w1), nc.leaf(params.w2)
                loss = gcn.inner_loss((w1, w2), x, ah, split, cfg)
                g = nc.grad(loss, w1 if which == "w1" else w2)
            num = central_diff(f, getattr(params, which))
            npt.assert_allclose(g.value, num, rtol=1e-6, atol=1e-10)

    def test_adjacency_gradient_matches_finite_differences(self):
        # differentiate through the degree normalization as well
        x, _, split, params, a = small_instance(9, n=5)
        cfg = LossConfig(rho=5e-4)

        def f(av):
            with Tape():
                ah = graphgen.normalize_adjacency_node(nc.leaf(av))
                return gcn.inner_loss((nc.leaf(params.w1), nc.leaf(params.w2)),
                                      x, ah, split, cfg).value.item()

        a0 = a + 0.3  # keep entries strictly positive so FD stays smooth
        np.fill_diagonal(a0, 0.7)
        with Tape():
            an = nc.leaf(a0)
            ah = graphgen.normalize_adjacency_node(an)
            loss = gcn.inner_loss((nc.leaf(params.w1), nc.leaf(params.w2)), x,
                                  ah, split, cfg)
            g = nc.grad(loss, an)
        npt.assert_allclose(g.value, central_diff(f, a0), rtol=1e-6, atol=1e-9)

    def test_empty_train_mask_rejected(self):
        x, labels, _, params, a = small_instance(10)
        split = LabeledSplit(labels, [], [0], [1], [2])
        with pytest.raises(GcnError):
            with Tape():
                gcn.inner_loss((nc.leaf(params.w1), nc.leaf(params.w2)), x,
                               normalized(a), split, LossConfig())


class TestPredictEmpirical:
    def test_degenerate_distribution_equals_single_forward(self):
        x, _, _, params, a = small_instance(11)
        dist = EdgeDistribution.deterministic(a)
        p = gcn.predict_empirical(params, x, dist, 4, Rng(0))
        npt.assert_allclose(p, gcn.forward_np(params, x, normalized(a).to_csr()),
                            atol=1e-12)

    def test_rows_are_distributions(self):
        x, _, _, params, _ = small_instance(12)
        theta = Rng(3).uniform((8, 8))
        theta = np.triu(theta, 1) + np.triu(theta, 1).T
        p = gcn.predict_empirical(params, x, EdgeDistribution(8, theta), 16, Rng(1))
        npt.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_more_samples_reduce_variance(self):
        x, _, _, params, _ = small_instance(13)
        theta = np.full((8, 8), 0.5)
        np.fill_diagonal(theta, 0.0)
        dist = EdgeDistribution(8, theta)

        def spread(s, reps=30):
            outs = [gcn.predict_empirical(params, x, dist, s, Rng(100 + r))
                    for r in range(reps)]
            return np.var(np.stack(outs), axis=0).mean()

        assert spread(16) < spread(1)

    def test_invalid_s(self):
        x, _, _, params, a = small_instance(14)
        with pytest.raises(GcnError):
            gcn.predict_empirical(params, x, EdgeDistribution.deterministic(a),
                                  0, Rng(0))


class TestAccuracy:
    def test_hand_example(self):
        split = LabeledSplit(np.array([0, 1, 1, 0]), [0, 1, 2], [], [], [3])
        pred = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.5, 0.5]])
        assert gcn.accuracy(pred, split, "train") == pytest.approx(2 / 3)

    def test_tie_breaks_to_lowest_class(self):
        split = LabeledSplit(np.array([0, 1]), [0, 1], [], [], [])
        pred = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert gcn.accuracy(pred, split, "train") == 0.5

    def test_accuracy_on_test_counts_label_reads(self):
        split = LabeledSplit(np.array([0, 1]), [0], [], [], [1])
        gcn.accuracy(np.array([[1.0, 0.0], [0.0, 1.0]]), split, "test")
        assert split.test_label_reads == 1


class TestTraining:
    def test_gradient_step_decreases_loss(self):
        x, _, split, params, a = small_instance(15)
        ah = normalized(a)
        cfg = LossConfig(rho=5e-4)

        def loss_and_grads(p):
            with Tape():
                w1, w2 = nc.leaf(p.w1), nc.leaf(p.w2)
                loss = gcn.inner_loss((w1, w2), x, ah, split, cfg)
                g1 = nc.grad(loss, w1)
                g2 = nc.grad(loss, w2)
                return loss.value.item(), g1.value.copy(), g2.value.copy()

        l0, g1, g2 = loss_and_grads(params)
        stepped = GcnParams(params.w1 - 0.05 * g1, params.w2 - 0.05 * g2)
        l1, _, _ = loss_and_grads(stepped)
        assert l1 < l0
