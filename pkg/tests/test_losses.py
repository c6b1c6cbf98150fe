import numpy as np
import pytest

from msscanet.exceptions import ConfigError, ShapeError
from msscanet.losses import LossWeights, ap_loss, cb_loss, l1_loss, loss_terms, mse, total_loss
from msscanet.model import BranchFeatures, ModelConfig, build_model, forward
from msscanet.patch import TokenGrid
from msscanet.tensor import Tensor, adaptive_avg_pool, grad_check


def grid(values, g, d=4):
    return TokenGrid(Tensor(np.asarray(values, dtype=float).reshape(g * g, d)), g, g)


def rand_grid(rng, g, d=4):
    return grid(rng.normal(size=(g * g, d)), g, d)


class TestL1:
    def test_zero_at_target(self):
        assert l1_loss(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0

    def test_hand_sum(self):
        assert l1_loss(Tensor([1.0, 2.0]), [2.0, 4.0]).item() == 1.5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l1_loss(Tensor([1.0]), [1.0, 2.0])

    def test_subgradient_away_from_kinks(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=6)
        offsets = rng.choice([-1, 1], size=6) * rng.uniform(0.1, 1.0, size=6)
        pred = Tensor(target + offsets)
        assert grad_check(lambda p: l1_loss(p, target), [pred]) <= 1e-4


class TestCB:
    def test_identical(self):
        g = rand_grid(np.random.default_rng(1), 3)
        assert cb_loss(g, g, 0.5).item() == 0.0

    def test_constant_offset(self):
        a = grid(np.zeros(36), 3)
        b = grid(np.full(36, 2.0), 3)
        assert cb_loss(a, b, 0.5).item() == 2.0

    def test_constant_pool_invariance(self):
        assert cb_loss(grid(np.ones(36 * 4), 6), grid(np.ones(144 * 4), 12), 0.5).item() == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rand_grid(rng, 3), rand_grid(rng, 6)
        assert cb_loss(a, b, 0.7).item() == pytest.approx(cb_loss(b, a, 0.7).item(), abs=1e-15)

    def test_pooling_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rand_grid(rng, 3), rand_grid(rng, 6)
        fine = b.tokens.data.T.reshape(4, 6, 6)
        pooled = fine.reshape(4, 3, 2, 3, 2).mean(axis=(2, 4))
        coarse = a.tokens.data.T.reshape(4, 3, 3)
        assert abs(cb_loss(a, b, 0.5).item() - 0.5 * np.mean((pooled - coarse) ** 2)) < 1e-12

    def test_dim_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ShapeError):
            cb_loss(rand_grid(rng, 2, 4), rand_grid(rng, 2, 8), 0.5)


class TestAP:
    def test_definitional_zero(self):
        g = rand_grid(np.random.default_rng(5), 6)
        pooled = TokenGrid.from_map(adaptive_avg_pool(g.to_map(), (3, 3)))
        assert ap_loss(g, pooled, 0.5).item() == 0.0

    def test_unit_offset(self):
        a = rand_grid(np.random.default_rng(6), 3)
        b = a.with_tokens(Tensor(a.tokens.data + 1.0))
        assert ap_loss(a, b, 0.5).item() == pytest.approx(0.5, abs=1e-15)

    def test_compositional_oracle(self):
        rng = np.random.default_rng(7)
        orig, pool = rand_grid(rng, 12), rand_grid(rng, 6)
        ref = mse(adaptive_avg_pool(orig.to_map(), (6, 6)), pool.to_map()).item() * 0.3
        assert abs(ap_loss(orig, pool, 0.3).item() - ref) < 1e-12

    def test_pool_larger_than_orig(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ShapeError):
            ap_loss(rand_grid(rng, 3), rand_grid(rng, 6), 0.5)


@pytest.fixture(scope="module")
def batch():
    m = build_model(ModelConfig.reduced())
    rng = np.random.default_rng(9)
    preds, feats = [], []
    for _ in range(2):
        mos, f = forward(m, rng.uniform(size=(3, 64, 64)))
        preds.append(mos.item())
        feats.append(f)
    return Tensor(preds), np.array([0.2, 0.9]), feats


class TestTotal:
    def test_l1_only_row_is_exactly_l1(self, batch):
        pred, target, feats = batch
        w = LossWeights(enable_cb=False, enable_ap=False)
        assert total_loss(pred, target, feats, w).item() == l1_loss(pred, target).item()

    def test_independent_summation(self, batch):
        pred, target, feats = batch
        t = loss_terms(pred, target, feats, LossWeights())
        cb = np.mean([cb_loss(f.F_s, f.F_l, 0.5).item() for f in feats])
        ap = np.mean([ap_loss(f.E_l, f.E_s, 0.5).item() for f in feats])
        assert abs(t["total"].item() - (l1_loss(pred, target).item() + cb + ap)) <= 1e-15

    def test_disabling_removes_exactly_the_term(self, batch):
        pred, target, feats = batch
        full = loss_terms(pred, target, feats, LossWeights())
        for flag, key in (("enable_cb", "cb"), ("enable_ap", "ap")):
            reduced = total_loss(pred, target, feats, LossWeights(**{flag: False})).item()
            assert abs(full["total"].item() - reduced - full[key].item()) <= 1e-15

    def test_all_zero_inputs(self):
        z = grid(np.zeros(16), 2)
        feats = BranchFeatures(F_s=z, F_l=z, E_s=z, E_l=z)
        assert total_loss(Tensor([0.0]), [0.0], feats, LossWeights()).item() == 0.0

    def test_single_branch_with_consistency_is_config_error(self):
        z = grid(np.zeros(16), 2)
        with pytest.raises(ConfigError, match="both branches"):
            total_loss(Tensor([0.0]), [0.0], BranchFeatures(F_l=z, E_l=z), LossWeights())

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            LossWeights(alpha=-1)
