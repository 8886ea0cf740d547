import numpy as np
import pytest

from imf import tensor as T
from imf.data import read_feature_file
from imf.gat import (
    DivergenceError,
    GatConfig,
    Graph,
    attention,
    energy,
    gat_forward,
    hinge_loss,
    init_params,
    pretrain,
)
from conftest import check_grad


def loop_attention(x, edges, W, a_src, a_dst, slope):
    """Per-node reference: softmax over in-neighbours, weighted sum of W x_j."""
    wh = x @ W
    n = x.shape[0]
    out = np.zeros((n, W.shape[1]))
    alphas = {}
    for i in range(n):
        nbrs = sorted({j for (d, j) in edges if d == i})
        logits = []
        for j in nbrs:
            z = float(wh[i] @ a_dst[:, 0] + wh[j] @ a_src[:, 0])
            logits.append(z if z > 0 else slope * z)
        w = np.exp(np.array(logits) - max(logits))
        w /= w.sum()
        for j, a in zip(nbrs, w):
            out[i] += a * wh[j]
            alphas[(i, j)] = a
    return out, alphas


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def test_graph_has_both_directions_and_self_loops():
    g = Graph.from_triples(np.array([[0, 0, 1], [1, 0, 2]]), 4)
    edges = set(zip(g.dst.tolist(), g.src.tolist()))
    assert edges == {(1, 0), (0, 1), (2, 1), (1, 2), (0, 0), (1, 1), (2, 2), (3, 3)}


def test_single_entity_self_loop_only():
    cfg = GatConfig(dim=3, layers=1, heads=1)
    params = T.parameters(*zip(*init_params(1, 1, cfg, np.random.default_rng(0)).items()))
    out = gat_forward(Graph.from_triples(np.zeros((0, 3)), 1), params, cfg).data
    np.testing.assert_allclose(out, elu(params["x"].data @ params["W0_0"].data))


def test_attention_normalises_per_node(rng):
    triples = np.array([[0, 0, 1], [0, 0, 2], [0, 1, 3], [4, 0, 1]])
    g = Graph.from_triples(triples, 5)
    x, W = T.tensor(rng.normal(size=(5, 4))), T.tensor(rng.normal(size=(4, 3)))
    a_s, a_d = T.tensor(rng.normal(size=(3, 1))), T.tensor(rng.normal(size=(3, 1)))
    _, alpha = attention(x, g, W, a_s, a_d, 0.2)
    sums = np.zeros(5)
    np.add.at(sums, g.dst, alpha.data[:, 0])
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    # node 0 attends over itself plus three neighbours
    assert np.count_nonzero(g.dst == 0) == 4


def test_five_node_forward_matches_loop_reference(rng):
    triples = np.array([[0, 0, 1], [1, 1, 2], [2, 0, 3], [3, 1, 4], [0, 1, 4]])
    cfg = GatConfig(dim=4, layers=2, heads=2, slope=0.2)
    params = T.parameters(*zip(*init_params(5, 2, cfg, rng).items()))
    g = Graph.from_triples(triples, 5)
    edges = list(zip(g.dst.tolist(), g.src.tolist()))
    p = {k: v.data for k, v in params.items()}

    hidden = [loop_attention(p["x"], edges, p[f"W0_{h}"], p[f"a_src0_{h}"], p[f"a_dst0_{h}"], 0.2)[0] for h in range(2)]
    h1 = elu(np.concatenate(hidden, axis=1))
    final = [loop_attention(h1, edges, p[f"W1_{h}"], p[f"a_src1_{h}"], p[f"a_dst1_{h}"], 0.2)[0] for h in range(2)]
    expected = elu((final[0] + final[1]) / 2)
    np.testing.assert_allclose(gat_forward(g, params, cfg).data, expected, atol=1e-12)


def test_gat_gradients(rng):
    triples = np.array([[0, 0, 1], [1, 0, 2], [2, 0, 0]])
    cfg = GatConfig(dim=3, layers=2, heads=2)
    init = init_params(3, 1, cfg, rng)
    g = Graph.from_triples(triples, 3)
    names = list(init)
    w = rng.normal(size=(3, 3))

    def fn(*tensors):
        return (gat_forward(g, dict(zip(names, tensors)), cfg) * w).sum()

    assert check_grad(fn, *init.values()) < 1e-4


def test_energy_examples(rng):
    v = rng.normal(size=4)
    assert energy(v, np.zeros(4), v).item() == 0.0
    assert energy([1.0, 0.0], [0.0, 1.0], [0.0, 0.0]).item() == 2.0
    h, r, t = rng.normal(size=(3, 5, 16))
    np.testing.assert_allclose(energy(h, r, t).data, [sum(abs(h[i, k] + r[i, k] - t[i, k]) for k in range(16)) for i in range(5)])


def test_hinge_examples():
    gamma = 1.0
    assert hinge_loss([0.0], [gamma + 1], gamma).item() == 0.0
    assert hinge_loss([2.5], [2.5], gamma).item() == gamma
    pos, neg = np.array([1.0, 2.0, 0.5]), np.array([1.5, 0.5, 3.0])
    hand = (max(0, 1 + 1 - 1.5) + max(0, 1 + 2 - 0.5) + max(0, 1 + 0.5 - 3.0)) / 3
    assert hinge_loss(pos, neg, gamma).item() == pytest.approx(hand)
    with pytest.raises(ValueError):
        hinge_loss([1.0, 2.0], [1.0], gamma)


def test_hinge_is_non_negative_and_zero_iff_margin_met(rng):
    for _ in range(100):
        pos, neg = rng.uniform(0, 3, 6), rng.uniform(0, 3, 6)
        loss = hinge_loss(pos, neg, 0.5).item()
        assert loss >= 0
        assert (loss == 0) == bool(np.all(neg - pos >= 0.5))


def test_config_validation():
    with pytest.raises(ValueError):
        GatConfig(margin=0)
    with pytest.raises(ValueError):
        GatConfig(heads=0)


def toy_triples():
    return np.array([[i % 8, i % 2, (3 * i + 1) % 8] for i in range(20)])


def test_zero_epochs_passes_initialisation_through_forward(tmp_path):
    cfg = GatConfig(dim=4, epochs=0, seed=3)
    res = pretrain(toy_triples(), 8, 2, cfg, tmp_path / "s.bin")
    params = T.parameters(*zip(*init_params(8, 2, cfg, np.random.default_rng(3)).items()))
    expect = gat_forward(Graph.from_triples(toy_triples(), 8), params, cfg).data
    np.testing.assert_allclose(res.features.matrix, expect)
    assert res.losses == []
    np.testing.assert_allclose(read_feature_file(tmp_path / "s.bin"), expect.astype(np.float32))


def test_pretrain_loss_decreases_on_toy_kg():
    res = pretrain(toy_triples(), 8, 2, GatConfig(dim=8, epochs=5, batch_size=20, lr=0.01, seed=0))
    increases = sum(b > a for a, b in zip(res.losses, res.losses[1:]))
    assert increases <= 1
    assert res.losses[-1] < res.initial_loss


def test_pretrain_is_bit_identical_under_seed(tmp_path):
    cfg = GatConfig(dim=6, epochs=3, batch_size=7, seed=11)
    pretrain(toy_triples(), 8, 2, cfg, tmp_path / "a.bin")
    pretrain(toy_triples(), 8, 2, cfg, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_pretrain_divergence_aborts():
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        pretrain(toy_triples(), 8, 2, GatConfig(dim=4, epochs=2, lr=1e308, seed=0))
