import numpy as np
import pytest
import torch
from torch import nn
from torch.func import functional_call

from src.config import LayerKind
from src.exceptions import UnsupportedQueryError
from src.modules.base import features_of
from src.modules.baselines import (FeatTransSearcher, GpnSearcher, MamlSearcher, QueryGNN, ReptileSearcher,
                                   SupervisedSearcher, gpn, gpn_logits, gpn_probabilities, inner_adapt, labels_loss,
                                   maml_meta_gradient, prototypes, query_outputs, reptile_update, supervised_gnn)
from src.modules.layers import bce_query_loss, gradient_check
from src.modules.tasks import QueryLabels


def test_untrained_supervised_scores_are_probabilities(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques)
    probs = SupervisedSearcher(small_baseline.model_copy(update={"epochs": 0})).predict(task)
    assert probs.shape == (2, 10)
    assert ((probs > 0) & (probs < 1)).all()


def test_supervised_fits_its_support_labels(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques, support=(0,), pos=3, neg=3)
    cfg = small_baseline.model_copy(update={"gnn_kind": LayerKind.GCN, "hidden_dim": 16, "epochs": 300, "lr": 0.05})
    searcher = SupervisedSearcher(cfg)
    searcher.predict(task)
    with torch.no_grad():
        assert labels_loss(searcher.model.eval(), task, task.support).item() < 0.1


def test_feattrans_adapts_only_the_final_layer(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques, support=(0, 9))
    searcher = FeatTransSearcher(small_baseline.model_copy(update={"finetune_lr": 0.01}))
    searcher.build(task.feature_dim)
    searcher.model.eval()

    adapted = searcher.adapt(task)
    final = {id(p) for p in adapted.final_layer().parameters()}
    for (name, before), after in zip(searcher.model.named_parameters(), adapted.parameters()):
        if id(after) in final:
            continue
        assert torch.equal(before, after), name

    with torch.no_grad():
        assert labels_loss(adapted, task, task.support) < labels_loss(searcher.model, task, task.support)


def test_maml_with_zero_outer_rate_keeps_parameters(sbm_taskset, small_baseline):
    searcher = MamlSearcher(small_baseline.model_copy(update={"outer_lr": 0.0, "epochs": 1}))
    searcher.fit(sbm_taskset.train)
    reference = QueryGNN(sbm_taskset.train[0].feature_dim, small_baseline, seed=0)
    for a, b in zip(searcher.model.parameters(), reference.parameters()):
        assert torch.equal(a, b)


def linear_problem():
    torch.manual_seed(0)
    model = nn.Linear(2, 2, bias=False)
    x_s, y_s = torch.randn(3, 2), torch.randn(3, 2)
    x_q, y_q = torch.randn(4, 2), torch.randn(4, 2)

    def support(p):
        return ((functional_call(model, p, (x_s,)) - y_s) ** 2).sum()

    def query(p):
        return ((functional_call(model, p, (x_q,)) - y_q) ** 2).sum()

    return model, support, query


def test_inner_adapt_with_zero_rate_is_identity():
    model, support, _ = linear_problem()
    params = {k: p.detach().clone().requires_grad_() for k, p in model.named_parameters()}
    adapted = inner_adapt(params, support, 0.0, 3)
    assert torch.equal(adapted["weight"], model.weight)


def test_first_order_meta_gradient_matches_hand_unrolled_step():
    model, support, query = linear_problem()
    alpha = 0.1

    w = model.weight.detach().clone().requires_grad_()
    (g_s,) = torch.autograd.grad(support({"weight": w}), [w])
    w1 = (w - alpha * g_s).detach().requires_grad_()
    (expected,) = torch.autograd.grad(query({"weight": w1}), [w1])

    (got,) = maml_meta_gradient(model, support, query, alpha, 1, first_order=True)
    torch.testing.assert_close(got, expected)


def test_second_order_meta_gradient_differentiates_the_inner_step():
    model, support, query = linear_problem()
    alpha = 0.1

    w = model.weight.detach().clone().requires_grad_()
    (g_s,) = torch.autograd.grad(support({"weight": w}), [w], create_graph=True)
    (expected,) = torch.autograd.grad(query({"weight": w - alpha * g_s}), [w])

    (got,) = maml_meta_gradient(model, support, query, alpha, 1, first_order=False)
    torch.testing.assert_close(got, expected)


def test_reptile_update_identities():
    theta = {"w": torch.tensor([1.0, 2.0])}
    a = {"w": torch.tensor([3.0, 0.0])}
    b = {"w": torch.tensor([1.0, 4.0])}
    torch.testing.assert_close(reptile_update(theta, [a], 0.0)["w"], theta["w"])
    torch.testing.assert_close(reptile_update(theta, [a], 1.0)["w"], a["w"])
    torch.testing.assert_close(reptile_update(theta, [a, b], 1.0)["w"], torch.tensor([2.0, 2.0]))
    torch.testing.assert_close(reptile_update(theta, [a], 0.5)["w"], torch.tensor([2.0, 1.0]))
    unchanged = {"w": theta["w"].clone()}
    torch.testing.assert_close(reptile_update(theta, [unchanged, unchanged], 0.7)["w"], theta["w"])


def test_gpn_probabilities():
    emb = torch.tensor([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [50.0, 0.0]])
    c_pos, c_neg = torch.tensor([1.0, 0.0]), torch.tensor([-1.0, 0.0])
    p = gpn_probabilities(emb, c_pos, c_neg)
    # equidistant node
    assert p[0].item() == pytest.approx(0.5)
    assert p[1] > 0.85 and p[2] < 0.15
    assert p[3].item() == pytest.approx(1 / (1 + np.exp(-2.0)), rel=1e-4)
    torch.testing.assert_close(p + gpn_probabilities(emb, c_neg, c_pos), torch.ones(4))
    torch.testing.assert_close(torch.sigmoid(gpn_logits(emb, c_pos, c_neg)), p)


def test_single_sample_prototypes_are_the_embeddings():
    emb = torch.randn(5, 3)
    c_pos, c_neg = prototypes(emb, [2], [4])
    torch.testing.assert_close(c_pos, emb[2])
    torch.testing.assert_close(c_neg, emb[4])


def test_gpn_rejects_query_without_negatives(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques)
    searcher = GpnSearcher(small_baseline)
    searcher.build(task.feature_dim)
    x = features_of(task, searcher.model)
    with pytest.raises(UnsupportedQueryError):
        searcher.query_probabilities(task, x, QueryLabels(1, (2,), ()), [2], [])


def test_query_gnn_gradients(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques, support=(0, 9))
    model = QueryGNN(task.feature_dim, small_baseline, seed=4).double().eval()
    err = gradient_check(lambda: labels_loss(model, task, task.support), list(model.parameters()), n_coords=30)
    assert err < 1e-4


@pytest.mark.parametrize("searcher_cls", [FeatTransSearcher, MamlSearcher, ReptileSearcher, GpnSearcher])
def test_trained_searchers_score_every_query(searcher_cls, sbm_taskset, small_baseline):
    searcher = searcher_cls(small_baseline).fit(sbm_taskset.train)
    assert len(searcher.history) == small_baseline.epochs
    task = sbm_taskset.test[0]
    probs = searcher.predict(task)
    assert probs.shape == (len(task.queryset_queries), task.graph.n)
    assert np.isfinite(probs).all()
    assert searcher.uses_queryset_labels == (searcher_cls is GpnSearcher)


def test_supervised_is_repeatable(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques, support=(0,), pos=3, neg=3)
    cfg = small_baseline.model_copy(update={"epochs": 5})
    np.testing.assert_array_equal(supervised_gnn(task, cfg, seed=2), supervised_gnn(task, cfg, seed=2))


def test_gpn_prototype_gradients(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques)
    searcher = GpnSearcher(small_baseline, seed=1)
    searcher.build(task.feature_dim)
    model = searcher.model.double().eval()
    x = features_of(task, model)
    labels = QueryLabels(0, (1, 2, 3), (6, 7, 8))

    def loss():
        emb = query_outputs(model, task.graph, x, 0)
        s = gpn_logits(emb, *prototypes(emb, [1, 2], [6, 7]))
        return bce_query_loss(s, QueryLabels(0, (3,), (8,)))

    assert torch.isfinite(loss())
    assert gradient_check(loss, list(model.parameters()), n_coords=30) < 1e-4
    assert searcher.query_probabilities(task, x, labels, [1, 2], [6, 7]).shape == (10,)


def test_maml_inner_step_gradients(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques, support=(0,), queries=(9,))
    cfg = small_baseline.model_copy(update={"gnn_kind": LayerKind.GCN})
    model = QueryGNN(task.feature_dim, cfg, seed=3).double().eval()
    query_labels = [QueryLabels(9, (5, 6), (0, 1))]

    def outer():
        with torch.enable_grad():
            adapted = inner_adapt(dict(model.named_parameters()),
                                  lambda p: labels_loss(model, task, task.support, p), 0.1, 1, create_graph=True)
            return labels_loss(model, task, query_labels, adapted)

    assert gradient_check(outer, list(model.parameters()), n_coords=30) < 1e-4


def test_gpn_wrapper_scores_test_queries(sbm_taskset, small_baseline):
    probs = gpn(sbm_taskset.train, sbm_taskset.test[1], small_baseline.model_copy(update={"epochs": 1}))
    assert probs.shape == (10, sbm_taskset.test[1].graph.n)
    assert ((probs >= 0) & (probs <= 1)).all()


def test_model_input_scales_core_numbers(sbm_taskset):
    task = sbm_taskset.train[0]
    x = features_of(task)
    assert task.base_features[:, 0].max() > 1
    assert x.abs().max().item() <= 1.0
    np.testing.assert_allclose(x[:, 0].numpy(), task.base_features[:, 0] / task.base_features[:, 0].max(), rtol=1e-6)
    np.testing.assert_allclose(x[:, 1].numpy(), task.base_features[:, 1], rtol=1e-6)


def test_supervised_loss_moves_off_a_saturated_start(two_cliques, make_task, small_baseline):
    task = make_task(two_cliques, support=(0,), pos=3, neg=3)
    model = QueryGNN(task.feature_dim, small_baseline, seed=0).double()
    with torch.no_grad():
        model.final_layer().bias.fill_(60.0)
    loss = labels_loss(model, task, task.support)
    assert torch.isfinite(loss) and loss.item() > 100
    (grad,) = torch.autograd.grad(loss, [model.final_layer().bias])
    assert grad.item() == pytest.approx(3.0, rel=1e-3)
