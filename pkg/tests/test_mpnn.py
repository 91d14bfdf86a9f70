import numpy as np
import pytest

from graphlora.graphio import Graph, Splits, SynthSpec, gen_synth, sym_norm_adj
from graphlora.mpnn import (
    BackboneParams,
    GnnConfig,
    PretrainConfig,
    TrainingError,
    forward,
    infonce,
    init_backbone,
    layer_forward,
    pretrain_contrastive,
    pretrain_supervised,
)
from graphlora.numerics import ContractError, finite_diff_check, make_rng


def small_source(seed=0, sep=4.0, n_per=40):
    return gen_synth(SynthSpec(nodes_per_class=n_per, num_classes=2, p_intra=0.15, p_inter=0.02,
                               dim=8, separation=sep, seed=seed))


class TestLayer:
    def test_identity_propagation(self):
        h = make_rng(0).standard_normal((4, 4))
        out = layer_forward(h, np.eye(4), np.eye(4), np.zeros(4)).data
        np.testing.assert_array_equal(out, np.maximum(h, 0))

    def test_all_negative_is_zero(self):
        out = layer_forward(np.ones((3, 2)), np.eye(3), -np.ones((2, 5)), -np.ones(5)).data
        assert np.all(out == 0)

    def test_two_node_by_hand(self):
        p = np.array([[0.5, 0.5], [0.5, 0.5]])
        h = np.array([[1.0, 2.0], [3.0, -4.0]])
        w = np.array([[1.0, -1.0], [0.5, 2.0]])
        b = np.array([0.1, -0.2])
        # P H = [[2, -1], [2, -1]]; (P H) W = [[1.5, -4], [1.5, -4]]; + b, ReLU
        expected = np.array([[1.6, 0.0], [1.6, 0.0]])
        np.testing.assert_allclose(layer_forward(h, p, w, b).data, expected, atol=1e-15)

    def test_shape_errors(self):
        with pytest.raises(ContractError):
            layer_forward(np.ones((3, 2)), np.eye(4), np.ones((2, 2)))
        with pytest.raises(ContractError):
            layer_forward(np.ones((3, 2)), np.eye(3), np.ones((3, 2)))

    def test_gradients(self):
        rng = make_rng(3)
        g = gen_synth(SynthSpec(nodes_per_class=5, num_classes=2, p_intra=0.5, dim=4, seed=3))
        p = sym_norm_adj(g)
        params = {"W0": rng.standard_normal((4, 3)), "b0": rng.standard_normal(3) * 0.1 + 0.3,
                  "W1": rng.standard_normal((3, 2)), "b1": rng.standard_normal(2) * 0.1 + 0.3}
        rep = finite_diff_check(lambda q: (forward(g.features, p, q) ** 2).sum(), params)
        assert rep.passed, rep.as_dict()


class TestForward:
    def test_single_layer_equals_layer_forward(self):
        rng = make_rng(1)
        bb = init_backbone(GnnConfig(5, (3,)), rng)
        x = rng.standard_normal((6, 5))
        p = np.eye(6)
        np.testing.assert_array_equal(forward(x, p, bb).data,
                                      layer_forward(x, p, bb.weights[0], bb.biases[0]).data)

    def test_pure(self):
        rng = make_rng(2)
        bb = init_backbone(GnnConfig(4, (6, 3)), rng).freeze()
        x, p = rng.standard_normal((5, 4)), sym_norm_adj(small_source(n_per=3))[:5, :5]
        assert forward(x, p, bb).data.tobytes() == forward(x, p, bb).data.tobytes()

    def test_two_layer_composition_oracle(self):
        rng = make_rng(4)
        g = small_source(n_per=6)
        p = sym_norm_adj(g)
        bb = BackboneParams([rng.standard_normal((8, 5)), rng.standard_normal((5, 3))],
                            [rng.standard_normal(5), rng.standard_normal(3)])
        h = g.features
        for w, b in zip(bb.weights, bb.biases):
            h = np.maximum(p @ h @ w + b, 0)
        np.testing.assert_allclose(forward(g.features, p, bb).data, h, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = make_rng(5)
        g = small_source(n_per=10)
        p = sym_norm_adj(g)
        bb = init_backbone(GnnConfig(8, (7, 4)), rng)
        perm = rng.permutation(g.n)
        out = forward(g.features, p, bb).data
        out_perm = forward(g.features[perm], p[np.ix_(perm, perm)], bb).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)

    def test_sparse_propagation_matches_dense(self):
        g = small_source(n_per=10)
        bb = init_backbone(GnnConfig(8, (4,)), make_rng(6))
        np.testing.assert_allclose(forward(g.features, sym_norm_adj(g, sparse=True), bb).data,
                                   forward(g.features, sym_norm_adj(g), bb).data, atol=1e-14)

    def test_frozen_weights_read_only(self):
        bb = init_backbone(GnnConfig(3, (2,)), make_rng(0)).freeze()
        with pytest.raises(ValueError):
            bb.weights[0][0, 0] = 1.0

    def test_bad_chain(self):
        with pytest.raises(ContractError):
            BackboneParams([np.ones((3, 4)), np.ones((5, 2))], [None, None])


def _infonce_oracle(h1, h2, tau):
    def norm(h):
        return h / np.linalg.norm(h, axis=1, keepdims=True)
    z1, z2 = norm(h1), norm(h2)
    total = 0.0
    for a, b in ((z1, z2), (z2, z1)):
        logits = a @ b.T / tau
        lse = np.log(np.exp(logits).sum(axis=1))
        total += np.mean(lse - np.diag(logits))
    return total / 2


class TestInfoNCE:
    def test_matches_oracle(self):
        rng = make_rng(8)
        h1, h2 = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
        assert infonce(h1, h2, 0.5).item() == pytest.approx(_infonce_oracle(h1, h2, 0.5), abs=1e-12)

    def test_identical_views_attain_aligned_value(self):
        h = make_rng(9).standard_normal((6, 3))
        assert infonce(h, h, 0.5).item() == pytest.approx(_infonce_oracle(h, h, 0.5), abs=1e-12)
        assert infonce(h, h, 0.5).item() < infonce(h, make_rng(10).standard_normal((6, 3)), 0.5).item()

    def test_no_augmentation_gives_identical_views(self):
        g = small_source(n_per=8)
        cfg = PretrainConfig(epochs=3, edge_drop=0.0, feature_mask=0.0, lr=1e-2)
        _, hist = pretrain_contrastive(g, GnnConfig(8, (6,)), cfg, return_history=True)
        bb = init_backbone(GnnConfig(8, (6,)), make_rng(cfg.seed))
        p = sym_norm_adj(g, sparse=True)
        h = forward(g.features, p, bb).data
        assert hist[0] == pytest.approx(_infonce_oracle(h, h, cfg.temperature), abs=1e-10)


class TestPretraining:
    def test_supervised_separable(self):
        g = small_source(seed=1, sep=4.0)
        cfg = PretrainConfig(mode="supervised", epochs=200, lr=1e-2)
        bb, head = pretrain_supervised(g, GnnConfig(8, (16, 8)), cfg, return_head=True)
        h = forward(g.features, sym_norm_adj(g), bb).data
        acc = np.mean(np.argmax(h @ head["head_W"] + head["head_b"], 1) == g.labels)
        assert acc >= 0.95
        assert bb.frozen

    def test_supervised_history_reaches_high_accuracy(self):
        g = small_source(seed=2, sep=4.0)
        cfg = PretrainConfig(mode="supervised", epochs=200, lr=1e-2)
        _, hist = pretrain_supervised(g, GnnConfig(8, (16, 8)), cfg, return_history=True)
        assert hist[-1] < hist[0] and hist[-1] < 0.2

    def test_zero_lr_keeps_init(self):
        g = small_source()
        cfg = PretrainConfig(mode="supervised", epochs=1, lr=0.0, weight_decay=0.0)
        bb = pretrain_supervised(g, GnnConfig(8, (4,)), cfg)
        init = init_backbone(GnnConfig(8, (4,)), make_rng(cfg.seed))
        assert bb.weights[0].tobytes() == init.weights[0].tobytes()

    def test_single_class_loss_vanishes(self):
        g = small_source()
        g1 = Graph(n=g.n, edges=g.edges, features=g.features, labels=np.zeros(g.n, dtype=int),
                   num_classes=1)
        _, hist = pretrain_supervised(g1, GnnConfig(8, (4,)), PretrainConfig(epochs=5, mode="supervised"),
                                      return_history=True)
        assert max(hist) == pytest.approx(0.0, abs=1e-12)

    def test_uses_train_split_when_present(self):
        g = small_source().with_splits(Splits([0, 1, 50, 51], [], []))
        bb = pretrain_supervised(g, GnnConfig(8, (4,)), PretrainConfig(epochs=2, mode="supervised"))
        assert bb.num_layers == 1

    def test_deterministic(self):
        g = small_source()
        cfg = PretrainConfig(epochs=10, lr=1e-2)
        a = pretrain_contrastive(g, GnnConfig(8, (6, 4)), cfg)
        b = pretrain_contrastive(g, GnnConfig(8, (6, 4)), cfg)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.weights, b.weights))

    def test_contrastive_loss_trend_and_class_structure(self):
        g = gen_synth(SynthSpec(nodes_per_class=60, num_classes=2, p_intra=0.12, p_inter=0.01, dim=8,
                                separation=2.0, seed=3))
        cfg = PretrainConfig(epochs=50, lr=1e-2)
        bb, hist = pretrain_contrastive(g, GnnConfig(8, (16, 8)), cfg, return_history=True)
        smooth = np.convolve(hist, np.ones(10) / 10, mode="valid")
        assert smooth[-1] < smooth[0]
        h = forward(g.features, sym_norm_adj(g), bb).data
        z = h / np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
        cos = z @ z.T
        same = g.labels[:, None] == g.labels[None, :]
        off = ~np.eye(g.n, dtype=bool)
        assert cos[same & off].mean() > cos[~same].mean()

    def test_divergence_raises(self):
        g = small_source()
        bad = Graph(n=g.n, edges=g.edges, features=g.features * 1e150, labels=g.labels, num_classes=2)
        cfg = PretrainConfig(epochs=5, mode="supervised", lr=1e200)
        with np.errstate(all="ignore"), pytest.raises(TrainingError):
            pretrain_supervised(bad, GnnConfig(8, (4,)), cfg)

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            PretrainConfig(edge_drop=1.0)
