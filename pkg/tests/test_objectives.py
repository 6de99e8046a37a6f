import math

import numpy as np
import pytest

from mdmoe import tensor as T
from mdmoe.masking import forward_mask
from mdmoe.model import MaskPredictor, ModelConfig, route
from mdmoe.objectives import (
    LB_WEIGHT,
    Z_WEIGHT,
    aux_losses,
    combine,
    diffusion_objective,
    load_balance_loss,
    pretrain_loss,
    sft_loss,
    z_loss,
)
from mdmoe.tensor import Tensor

M = 5


def onehot_dists(y, p_true, K=6):
    d = np.zeros((len(y), K))
    d[np.arange(len(y)), y] = p_true
    if p_true < 1:
        d[np.arange(len(y)), (np.asarray(y) + 1) % (K - 1)] += 1 - p_true
    return d


def test_pretrain_loss_examples():
    y = np.array([0, 1, 2, 3, 0, 1])
    y_t = y.copy()
    y_t[[1, 3, 5]] = M
    assert pretrain_loss(y, 0.5, y_t, onehot_dists(y, 1.0), M) == 0.0
    assert pretrain_loss(y, 0.5, y_t, onehot_dists(y, 0.5), M) == pytest.approx(4.1589, abs=1e-4)
    assert pretrain_loss(y, 0.5, y, onehot_dists(y, 0.5), M) == 0.0
    with pytest.raises(ValueError):
        pretrain_loss(y, 0.0, y_t, onehot_dists(y, 0.5), M)


def test_uniform_predictor_expectation():
    rng = np.random.default_rng(0)
    K, L, n = 4, 8, 100_000
    t = rng.random(n)
    m = (rng.random((n, L)) < t[:, None]).sum(axis=1)
    vals = np.where(m > 0, m / np.where(m > 0, t, 1.0), 0.0) * math.log(K)
    assert abs(vals.mean() - L * math.log(K)) < 0.1 + 3 * vals.std() / math.sqrt(n)
    # the same through pretrain_loss on a handful of samples
    y = rng.integers(0, K - 1, size=L)
    d = np.full((L, K), 1.0 / K)
    y_t = forward_mask(y, 0.4, rng, K - 1)
    assert pretrain_loss(y, 0.4, y_t, d, K - 1) == pytest.approx((y_t.ids == K - 1).sum() / 0.4 * math.log(K))


def test_sft_loss_examples():
    x = np.array([1, 2])
    y = np.array([3, 4, 4])  # a, EOS, EOS with EOS = 4
    full = np.concatenate([x, y])
    y_t = np.concatenate([x, [M, M, M]])
    assert sft_loss(x, y, 1.0, np.concatenate([x, y]), onehot_dists(full, 0.5), M) == 0.0
    assert sft_loss(x, y, 1.0, y_t, onehot_dists(full, 1.0), M) == 0.0
    assert sft_loss(x, y, 1.0, y_t, onehot_dists(full, 0.5), M) == pytest.approx(3 * math.log(2), abs=1e-4)
    with pytest.raises(ValueError):
        sft_loss(x, y, 1.0, np.array([M, 2, M, M, M]), onehot_dists(full, 0.5), M)
    empty = np.zeros(0, dtype=int)
    assert sft_loss(empty, y, 0.5, y_t[2:], onehot_dists(y, 0.5), M) == pretrain_loss(y, 0.5, y_t[2:], onehot_dists(y, 0.5), M)


def test_load_balance_examples():
    assert load_balance_loss((np.full(4, 0.25), np.full(4, 0.25))) == pytest.approx(1.0)
    assert load_balance_loss((np.full(64, 8 / 64), np.full(64, 1 / 64))) == pytest.approx(8.0)
    f = np.zeros(10)
    f[0] = 1.0
    assert load_balance_loss((f, f)) == pytest.approx(10.0)


def test_load_balance_lower_bound_on_aligned_routings():
    rng = np.random.default_rng(0)
    for _ in range(200):
        N, k = int(rng.integers(2, 16)), None
        k = int(rng.integers(1, N + 1))
        P = np.sort(rng.dirichlet(np.ones(N)))
        f = np.sort(rng.dirichlet(np.ones(N))) * k
        assert load_balance_loss((f, P)) >= k - 1e-9


def test_load_balance_from_decision_and_empty():
    d = route(Tensor(np.zeros((6, 3))), Tensor(np.zeros((3, 4))), 1)
    assert isinstance(load_balance_loss(d), Tensor)
    assert load_balance_loss(d).item() == pytest.approx(4 * 0.25)  # all tokens pick expert 0 by tie-break
    with pytest.raises(ValueError):
        route(Tensor(np.zeros((0, 3))), Tensor(np.zeros((3, 4))), 1)


def test_z_loss_examples():
    assert z_loss(np.zeros((3, 64))) == pytest.approx(math.log(64) ** 2)
    assert z_loss(np.array([[math.log(2), math.log(2)]])) == pytest.approx(math.log(4) ** 2, abs=1e-4)
    z = np.random.default_rng(0).normal(size=(4, 6))
    z -= np.log(np.exp(z).sum(-1, keepdims=True))
    assert z_loss(z) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        z_loss(np.zeros((0, 4)))
    assert z_loss(Tensor(np.zeros((3, 64)))).item() == pytest.approx(math.log(64) ** 2, rel=1e-6)


def test_combine():
    assert (LB_WEIGHT, Z_WEIGHT) == (0.01, 0.001)
    assert combine(1.0, 1.0, 1.0) == pytest.approx(1.011, abs=1e-15)
    assert combine(0.0, 8.0, math.log(64) ** 2) == pytest.approx(0.0973, abs=1e-4)
    assert combine(2.5, 7.0, 9.0, 0.0, 0.0) == 2.5


def _model():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, n_experts=4, n_active=2, d_expert=8,
                      max_context=16, vocab=8, mask_id=7, eos_id=6, init_std=0.3)
    return MaskPredictor(cfg, seed=0).astype(np.float64)


def test_diffusion_objective_matches_reference():
    model = _model()
    rng = np.random.default_rng(0)
    clean = rng.integers(0, 7, size=(3, 10))
    t = np.array([0.3, 0.6, 0.9])
    noisy = forward_mask(clean, t, rng, 7).ids
    with T.precision(np.float64):
        total, br, decisions = diffusion_objective(model, clean, noisy, t)
    dists = model.predict(noisy)
    ref = np.mean([pretrain_loss(clean[i], t[i], noisy[i], dists[i], 7) / 10 for i in range(3)])
    assert br.task_loss == pytest.approx(ref, rel=1e-10)
    lb, z = aux_losses(decisions)
    assert br.lb_loss == pytest.approx(np.mean([load_balance_loss(d).item() for d in decisions]))
    assert br.total == pytest.approx(br.task_loss + 0.01 * br.lb_loss + 0.001 * br.z_loss)
    assert br.masked_count == int((noisy == 7).sum())
    assert total.item() == pytest.approx(br.total)
    assert br.task_loss >= 0 and br.z_loss >= 0


def test_diffusion_objective_region_and_errors():
    model = _model()
    clean = np.arange(8).reshape(1, 8) % 7
    noisy = clean.copy()
    noisy[0, 5:] = 7
    region = np.zeros((1, 8), dtype=bool)
    region[0, 4:] = True
    _, br, _ = diffusion_objective(model, clean, noisy, np.array([0.5]), region)
    dists = model.predict(noisy)
    assert br.task_loss == pytest.approx(sft_loss(clean[0, :4], clean[0, 4:], 0.5, noisy[0], dists[0], 7) / 4, rel=1e-5)
    with pytest.raises(ValueError):
        diffusion_objective(model, clean, noisy, np.array([0.5]), ~region)
    with pytest.raises(ValueError):
        diffusion_objective(model, clean, noisy, np.array([0.0]))


def test_router_gradient_nonzero_when_imbalanced():
    model = _model()
    r = model.params["layers.0.router"]
    r.data[:] = 0
    r.data[:, 0] = 3.0  # push every token to expert 0
    clean = np.random.default_rng(1).integers(0, 7, size=(2, 8))
    total, _, decisions = diffusion_objective(model, clean, clean, np.array([0.5, 0.5]), lb_weight=0.01, z_weight=0.0)
    assert decisions[0].f.max() > 0.5
    total.backward()
    assert np.abs(r.grad).max() > 0
