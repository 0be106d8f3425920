import numpy as np
import pytest

from fedgcf.graph import build_graph, normalize
from fedgcf.model import (
    GcfParams,
    LayerEmbeddings,
    bpr_loss_and_grad,
    default_even_layers,
    final_representation,
    init_params,
    params_from_vector,
    params_to_vector,
    propagate,
    sample_negatives,
    score,
    score_all,
    sgd_step,
    structure_loss_and_grad,
    train_epoch,
    zeros_like_params,
)
from fedgcf.numerics import grad_check, leaky_relu
from fedgcf.rng import Rng

LN2 = float(np.log(2.0))


def tiny_instance(num_layers=2, dim=3, seed=11):
    g, _, _ = build_graph(
        [(0, 0), (0, 1), (1, 1), (2, 2), (3, 3), (4, 0), (4, 3)],
        num_users=5, num_items=4,
    )
    params = init_params(5, 4, dim, num_layers, Rng(seed))
    return params, g, normalize(g)


# -- propagation -------------------------------------------------------------


def test_layer_zero_is_the_raw_tables():
    params, _, adj = tiny_instance()
    layers = propagate(params, adj)
    assert len(layers.users) == params.num_layers + 1
    np.testing.assert_array_equal(layers.users[0], params.user_emb)
    np.testing.assert_array_equal(layers.items[0], params.item_emb)


def test_no_edges_reduces_to_self_transform():
    # without neighbors the update is leaky_relu(W1 e + b) for every row
    g, _, _ = build_graph([], num_users=3, num_items=2)
    params = init_params(3, 2, 4, 1, Rng(0))
    layers = propagate(params, normalize(g))
    for table, out in ((params.user_emb, layers.users[1]),
                       (params.item_emb, layers.items[1])):
        expect = leaky_relu(table @ params.w1[0] + params.bias[0], 0.2)
        np.testing.assert_allclose(out, expect, atol=1e-12)


def test_identity_weights_zero_bias_no_edges():
    g, _, _ = build_graph([], num_users=2, num_items=2)
    params = init_params(2, 2, 3, 1, Rng(3))
    params.w1[0][:] = np.eye(3)
    params.w2[0][:] = 0.0
    params.bias[0][:] = 0.0
    layers = propagate(params, normalize(g))
    np.testing.assert_allclose(layers.users[1], leaky_relu(params.user_emb, 0.2), atol=1e-12)


def brute_force_layer(params, graph, layer_users, layer_items, layer):
    """Per-row recomputation of one propagation step, straight from the rule."""
    w1, w2, b = params.w1[layer], params.w2[layer], params.bias[layer]
    du = graph.user_degrees
    di = graph.item_degrees
    out_u = np.zeros_like(layer_users)
    for u in range(graph.num_users):
        z = layer_users[u] @ w1 + b
        for i in graph.items_of(u):
            w = 1.0 / np.sqrt(du[u] * di[i])
            z += w * (layer_items[i] @ w1 + (layer_items[i] * layer_users[u]) @ w2)
        out_u[u] = leaky_relu(z, 0.2)
    out_i = np.zeros_like(layer_items)
    for i in range(graph.num_items):
        z = layer_items[i] @ w1 + b
        for u in graph.users_of(i):
            w = 1.0 / np.sqrt(du[u] * di[i])
            z += w * (layer_users[u] @ w1 + (layer_users[u] * layer_items[i]) @ w2)
        out_i[i] = leaky_relu(z, 0.2)
    return out_u, out_i


def test_propagation_matches_per_row_brute_force():
    params, g, adj = tiny_instance(num_layers=2)
    layers = propagate(params, adj)
    eu, ei = params.user_emb, params.item_emb
    for layer in (0, 1):
        eu, ei = brute_force_layer(params, g, eu, ei, layer)
        np.testing.assert_allclose(layers.users[layer + 1], eu, atol=1e-12)
        np.testing.assert_allclose(layers.items[layer + 1], ei, atol=1e-12)


# -- representations and scoring ---------------------------------------------


def test_final_representation_concat_order():
    params, _, adj = tiny_instance(num_layers=2, dim=3)
    layers = propagate(params, adj)
    u_repr, i_repr = final_representation(layers)
    assert u_repr.shape == (5, 9)
    assert i_repr.shape == (4, 9)
    np.testing.assert_array_equal(u_repr[:, :3], layers.users[0])
    np.testing.assert_array_equal(u_repr[:, 6:], layers.users[2])


def test_single_layer_representation_is_identity():
    rows = np.arange(6.0).reshape(2, 3)
    layers = LayerEmbeddings(users=[rows], items=[rows + 1.0])
    u_repr, i_repr = final_representation(layers)
    np.testing.assert_array_equal(u_repr, rows)
    np.testing.assert_array_equal(i_repr, rows + 1.0)


def test_score_hand_values():
    assert score(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == pytest.approx(11.0)
    assert score(np.array([1.0, 0.0]), np.array([0.0, 5.0])) == pytest.approx(0.0)


def test_score_linear_in_each_argument():
    rng = Rng(5)
    u = rng.normal(size=4)
    v = rng.normal(size=4)
    assert score(3.0 * u, v) == pytest.approx(3.0 * score(u, v), rel=1e-12)
    w = rng.normal(size=4)
    assert score(u, v + w) == pytest.approx(score(u, v) + score(u, w), rel=1e-10)


def test_score_all_agrees_with_concat_dot():
    params, _, adj = tiny_instance()
    layers = propagate(params, adj)
    u_repr, i_repr = final_representation(layers)
    users = np.array([0, 3])
    got = score_all(layers, users)
    np.testing.assert_allclose(got, u_repr[users] @ i_repr.T, atol=1e-10)


# -- pairwise ranking loss ---------------------------------------------------


def test_bpr_all_zero_parameters_gives_ln2():
    params, _, adj = tiny_instance()
    zeros = zeros_like_params(params)
    loss, grads = bpr_loss_and_grad(zeros, adj, (np.array([0]), np.array([1]), np.array([2])))
    assert loss == pytest.approx(LN2, abs=1e-12)


def test_bpr_unit_score_difference():
    # zero propagation weights reduce scoring to the raw dot product
    params, _, adj = tiny_instance(dim=2)
    for a in params.w1 + params.w2 + params.bias:
        a[:] = 0.0
    params.user_emb[:] = 0.0
    params.item_emb[:] = 0.0
    params.user_emb[0] = [1.0, 0.0]
    params.item_emb[1] = [1.0, 0.0]
    loss, _ = bpr_loss_and_grad(params, adj, (np.array([0]), np.array([1]), np.array([2])))
    assert loss == pytest.approx(-np.log(1.0 / (1.0 + np.exp(-1.0))), abs=1e-12)


def test_bpr_depends_only_on_score_differences():
    params, _, adj = tiny_instance(dim=2)
    for a in params.w1 + params.w2 + params.bias:
        a[:] = 0.0
    params.user_emb[:] = 0.0
    params.user_emb[0] = [1.0, 1.0]
    params.item_emb[:] = 0.0
    params.item_emb[0, 0] = 0.7
    params.item_emb[1, 0] = -0.2
    triples = (np.array([0]), np.array([0]), np.array([1]))
    base, _ = bpr_loss_and_grad(params, adj, triples)
    params.item_emb[0, 1] += 3.5    # shifts both scores by the same amount
    params.item_emb[1, 1] += 3.5
    shifted, _ = bpr_loss_and_grad(params, adj, triples)
    assert shifted == pytest.approx(base, abs=1e-12)


def test_bpr_empty_batch_rejected():
    params, _, adj = tiny_instance()
    with pytest.raises(ValueError):
        bpr_loss_and_grad(params, adj, (np.array([], dtype=np.int64),) * 3)


def test_bpr_out_of_range_indices_rejected():
    params, _, adj = tiny_instance()
    with pytest.raises(ValueError):
        bpr_loss_and_grad(params, adj, (np.array([0]), np.array([99]), np.array([1])))


def test_bpr_gradient_against_central_differences():
    params, _, adj = tiny_instance(num_layers=2, dim=3, seed=21)
    triples = (np.array([0, 2, 4]), np.array([1, 2, 0]), np.array([3, 0, 2]))
    lam = 1e-3

    def f(vec):
        p = params_from_vector(vec, params)
        return bpr_loss_and_grad(p, adj, triples, reg_lambda=lam)[0]

    loss, grads = bpr_loss_and_grad(params, adj, triples, reg_lambda=lam)
    err = grad_check(f, params_to_vector(grads), params_to_vector(params), eps=1e-5)
    assert err < 1e-4


def test_regularizer_covers_every_parameter_block():
    params, _, adj = tiny_instance()
    triples = (np.array([0]), np.array([1]), np.array([2]))
    loss0, _ = bpr_loss_and_grad(params, adj, triples, reg_lambda=0.0)
    loss1, _ = bpr_loss_and_grad(params, adj, triples, reg_lambda=0.5)
    assert loss1 - loss0 == pytest.approx(0.5 * params.weight_sq_norm(), rel=1e-10)


# -- contrastive structure loss ----------------------------------------------


def make_layers(arrays):
    return LayerEmbeddings(users=list(arrays), items=[np.zeros_like(a) for a in arrays])


def test_structure_single_user_batch_is_zero():
    rows = Rng(2).normal(size=(4, 3))
    layers = make_layers([rows, rows * 0.5, rows * 2.0])
    loss, grads = structure_loss_and_grad(layers, np.array([1]), tau=0.1, even_layers=(2,))
    assert loss == pytest.approx(0.0, abs=1e-12)
    for g in grads.values():
        np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_structure_identical_rows_two_users():
    # every similarity equal, so each anchor's softmax puts 1/2 on its positive
    rows = np.ones((2, 3))
    layers = make_layers([rows, rows, rows])
    loss, _ = structure_loss_and_grad(layers, np.array([0, 1]), tau=0.1, even_layers=(2,))
    assert loss == pytest.approx(2.0 * LN2, abs=1e-10)


def infonce_oracle(layers, batch, tau, even_layers):
    anchors = layers.users[0][batch]
    total = 0.0
    for layer in even_layers:
        cand = layers.users[layer][batch]
        for i in range(len(batch)):
            logits = anchors[i] @ cand.T / tau
            total += -np.log(np.exp(logits[i]) / np.exp(logits).sum())
    return total


def test_structure_loss_matches_direct_softmax_oracle():
    rng = Rng(9)
    layers = make_layers([rng.normal(size=(6, 4)) for _ in range(4)])
    batch = np.array([0, 2, 3, 5])
    loss, _ = structure_loss_and_grad(layers, batch, tau=0.2, even_layers=(2, 3))
    assert loss == pytest.approx(infonce_oracle(layers, batch, 0.2, (2, 3)), abs=1e-10)


def test_structure_loss_nonnegative():
    rng = Rng(13)
    for _ in range(20):
        layers = make_layers([rng.normal(size=(5, 3)) for _ in range(3)])
        loss, _ = structure_loss_and_grad(layers, np.array([0, 1, 4]), tau=0.5, even_layers=(2,))
        assert loss >= -1e-12


def test_structure_gradients_against_central_differences():
    rng = Rng(17)
    base = [rng.normal(size=(5, 3)) for _ in range(4)]
    batch = np.array([0, 1, 3])
    tau = 0.3
    _, grads = structure_loss_and_grad(make_layers(base), batch, tau, even_layers=(2,))

    for layer in (0, 2):
        def f(rows, layer=layer):
            arrays = [a.copy() for a in base]
            arrays[layer][batch] = rows.reshape(3, 3)
            return structure_loss_and_grad(make_layers(arrays), batch, tau, even_layers=(2,))[0]

        err = grad_check(f, grads[layer].ravel(), base[layer][batch].ravel(), eps=1e-6)
        assert err < 1e-5


def test_structure_input_validation():
    rows = np.ones((3, 2))
    layers = make_layers([rows, rows, rows])
    with pytest.raises(ValueError):
        structure_loss_and_grad(layers, np.array([0, 1]), tau=0.0, even_layers=(2,))
    with pytest.raises(ValueError):
        structure_loss_and_grad(layers, np.array([0, 0]), tau=0.1, even_layers=(2,))
    with pytest.raises(ValueError):
        structure_loss_and_grad(layers, np.array([], dtype=np.int64), tau=0.1, even_layers=(2,))
    with pytest.raises(ValueError):
        structure_loss_and_grad(layers, np.array([0]), tau=0.1, even_layers=(5,))


def test_default_even_layers():
    assert default_even_layers(3) == (2,)
    assert default_even_layers(4) == (2, 4)
    assert default_even_layers(1) == ()


# -- optimizer step ----------------------------------------------------------


def test_sgd_step_zero_gradient_is_identity():
    params, _, _ = tiny_instance()
    out = sgd_step(params, zeros_like_params(params), lr=0.5)
    for p, q in zip(params.arrays(), out.arrays()):
        np.testing.assert_array_equal(p, q)


def test_sgd_step_hand_value():
    params, _, _ = tiny_instance()
    grads = zeros_like_params(params)
    params.user_emb[0, 0] = 1.0
    grads.user_emb[0, 0] = 0.25
    out = sgd_step(params, grads, lr=0.8)
    assert out.user_emb[0, 0] == pytest.approx(0.8)


def test_sgd_two_half_steps_equal_one_full_step():
    params, _, _ = tiny_instance(seed=29)
    grads = init_params(5, 4, 3, 2, Rng(31))
    once = sgd_step(params, grads, lr=0.2)
    twice = sgd_step(sgd_step(params, grads, lr=0.1), grads, lr=0.1)
    for a, b in zip(once.arrays(), twice.arrays()):
        np.testing.assert_allclose(a, b, atol=1e-14)


# -- training loop -----------------------------------------------------------


def planted_graph(num_users=30, num_items=20, seed=41):
    """Each user interacts only inside one half of the catalog."""
    rng = Rng(seed)
    edges = []
    for u in range(num_users):
        lo, hi = (0, num_items // 2) if u % 2 == 0 else (num_items // 2, num_items)
        items = rng.choice(np.arange(lo, hi), size=5, replace=False)
        edges.extend((u, int(i)) for i in items)
    g, _, _ = build_graph(edges, num_users=num_users, num_items=num_items)
    return g


def test_train_epoch_zero_learning_rate_is_identity():
    g = planted_graph()
    params = init_params(30, 20, 4, 2, Rng(1))
    before = [a.copy() for a in params.arrays()]
    train_epoch(params, g, ("bpr",), lr=0.0, reg_lambda=0.0, tau=0.1,
                batch_size=32, rng=Rng(2), optimizer="sgd")
    for a, b in zip(params.arrays(), before):
        np.testing.assert_array_equal(a, b)


def test_train_epoch_fixed_seed_is_bitwise_deterministic():
    g = planted_graph()
    runs = []
    for _ in range(2):
        params = init_params(30, 20, 4, 2, Rng(7))
        train_epoch(params, g, ("bpr", "struc"), lr=0.01, reg_lambda=1e-4,
                    tau=0.1, batch_size=32, rng=Rng(8))
        runs.append([a.copy() for a in params.arrays()])
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_train_epoch_learns_planted_preference():
    g = planted_graph()
    params = init_params(30, 20, 8, 2, Rng(3))
    rng = Rng(4)
    stats = {}
    stepper = None
    for _ in range(20):
        from fedgcf.optim import make_stepper
        if stepper is None:
            stepper = make_stepper("adam", params.arrays())
        params, stats = train_epoch(params, g, ("bpr",), lr=0.01, reg_lambda=1e-5,
                                    tau=0.1, batch_size=64, rng=rng, stepper=stepper)
    assert stats["mean_bpr"] < LN2


def test_train_epoch_skips_full_catalog_users():
    # user 0 has no possible negative item, so its edges are dropped
    edges = [(0, i) for i in range(4)] + [(1, 0), (1, 1), (2, 2)]
    g, _, _ = build_graph(edges, num_users=3, num_items=4)
    params = init_params(3, 4, 3, 1, Rng(5))
    _, stats = train_epoch(params, g, ("bpr",), lr=0.01, reg_lambda=0.0, tau=0.1,
                           batch_size=8, rng=Rng(6))
    assert stats["n_skipped"] == 4
    assert stats["n_triples"] == 3


def test_train_epoch_rejects_bad_inputs():
    g = planted_graph()
    params = init_params(30, 20, 4, 2, Rng(1))
    with pytest.raises(ValueError):
        train_epoch(params, g, ("nope",), lr=0.01, reg_lambda=0.0, tau=0.1,
                    batch_size=8, rng=Rng(1))
    with pytest.raises(ValueError):
        train_epoch(params, g, (), lr=0.01, reg_lambda=0.0, tau=0.1,
                    batch_size=8, rng=Rng(1))
    empty, _, _ = build_graph([], num_users=2, num_items=2)
    with pytest.raises(ValueError):
        train_epoch(params, empty, ("bpr",), lr=0.01, reg_lambda=0.0, tau=0.1,
                    batch_size=8, rng=Rng(1))


def test_sample_negatives_avoids_observed_items():
    g = planted_graph()
    rng = Rng(19)
    users = np.repeat(np.arange(30), 3)
    negs = sample_negatives(g, users, rng)
    assert not g.has_edges(users, negs).any()


def test_vector_roundtrip():
    params, _, _ = tiny_instance(seed=23)
    vec = params_to_vector(params)
    back = params_from_vector(vec, params)
    for a, b in zip(params.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        params_from_vector(vec[:-1], params)
