"""Gradient correctness against central finite differences, the per-example
decomposition, and the frozen-truncation contract."""

import numpy as np
import pytest

from fedskip.errors import InputError
from fedskip.model import Batch, ModelConfig, grad_check, init_params, loss_and_grads
from fedskip.partition import make_partition
from fedskip.rng import Rng

from test_model import random_batch, tiny_cfg


@pytest.mark.parametrize("task,n_types", [("tagging", 2), ("multilabel", 3), ("mlm", 1)])
def test_finite_difference_oracle_all_trainable(task, n_types):
    cfg = tiny_cfg(task=task, n_types=n_types)
    batch = random_batch(cfg, b=3, t=5, seed=11)
    report = grad_check(cfg, make_partition(cfg, "all"), batch, tol=1e-4, seed=5)
    assert report.passed, f"{report.worst_tensor}: {report.max_rel_err}"


def test_finite_difference_oracle_top_k():
    cfg = tiny_cfg()
    batch = random_batch(cfg, b=2, t=4, seed=13)
    report = grad_check(cfg, make_partition(cfg, "top_k", k=1), batch, tol=1e-4, seed=5)
    assert report.passed, f"{report.worst_tensor}: {report.max_rel_err}"


def test_grad_check_deterministic():
    cfg = tiny_cfg()
    batch = random_batch(cfg, seed=17)
    part = make_partition(cfg, "all")
    a = grad_check(cfg, part, batch, seed=3)
    b = grad_check(cfg, part, batch, seed=3)
    assert a.max_rel_err == b.max_rel_err
    assert a.per_tensor == b.per_tensor


def test_gradients_restricted_to_trainable_keyset():
    cfg = tiny_cfg()
    params = init_params(cfg, 7, dtype=np.float64)
    batch = random_batch(cfg)
    part = make_partition(cfg, "top_k", k=0)  # head only
    _, grads = loss_and_grads(cfg, params, part, batch)
    assert sorted(grads) == [3]
    part1 = make_partition(cfg, "top_k", k=1)
    _, grads1 = loss_and_grads(cfg, params, part1, batch)
    assert sorted(grads1) == [2, 3]


def test_truncated_backward_matches_full_backward():
    # gradients of the top block must not depend on whether lower blocks
    # also receive gradient computation
    cfg = tiny_cfg()
    params = init_params(cfg, 7, dtype=np.float64)
    batch = random_batch(cfg)
    _, g_all = loss_and_grads(cfg, params, make_partition(cfg, "all"), batch)
    _, g_top = loss_and_grads(cfg, params, make_partition(cfg, "top_k", k=1), batch)
    for name in g_top[2]:
        assert np.allclose(g_top[2][name], g_all[2][name], rtol=0, atol=1e-12)
    assert g_top[3]["w_head"].tobytes() == g_all[3]["w_head"].tobytes()


@pytest.mark.parametrize("task,n_types", [("tagging", 2), ("multilabel", 3)])
def test_per_example_mean_equals_batch_gradient(task, n_types):
    cfg = tiny_cfg(task=task, n_types=n_types)
    params = init_params(cfg, 9, dtype=np.float64)
    batch = random_batch(cfg, b=4, t=5, seed=23)
    part = make_partition(cfg, "all")
    loss_b, batch_grads = loss_and_grads(cfg, params, part, batch)
    loss_p, per_ex = loss_and_grads(cfg, params, part, batch, per_example=True)
    assert loss_b == pytest.approx(loss_p, abs=1e-14)
    assert len(per_ex) == 4
    for gid in batch_grads:
        for name in batch_grads[gid]:
            mean = np.mean([p[gid][name] for p in per_ex], axis=0)
            assert np.allclose(mean, batch_grads[gid][name], rtol=0, atol=1e-10)


def test_zero_head_gives_zero_backbone_gradient():
    cfg = tiny_cfg()
    params = init_params(cfg, 7, dtype=np.float64)
    params.groups[cfg.head_group]["w_head"][:] = 0.0
    batch = random_batch(cfg)
    _, grads = loss_and_grads(cfg, params, make_partition(cfg, "all"), batch)
    for gid in (0, 1, 2):
        for name, g in grads[gid].items():
            assert np.abs(g).max() < 1e-15, f"{gid}/{name}"
    assert np.abs(grads[3]["w_head"]).max() > 0  # the head itself still learns


def test_empty_batch_rejected():
    cfg = tiny_cfg()
    params = init_params(cfg, 7)
    with pytest.raises(InputError):
        loss_and_grads(cfg, params, make_partition(cfg, "all"),
                       Batch(tokens=np.empty((0, 5), dtype=int)))


def test_loss_decreases_along_negative_gradient():
    cfg = tiny_cfg()
    params = init_params(cfg, 7, dtype=np.float64)
    batch = random_batch(cfg)
    part = make_partition(cfg, "all")
    loss0, grads = loss_and_grads(cfg, params, part, batch)
    for gid in grads:
        for name in grads[gid]:
            params.groups[gid][name] -= 0.05 * grads[gid][name]
    loss1, _ = loss_and_grads(cfg, params, part, batch)
    assert loss1 < loss0
