import math

import numpy as np
import pytest

from immunoattn.checkpoint import Checkpoint
from immunoattn.embedio import synthetic_bundles
from immunoattn.errors import DataError, NumericalError
from immunoattn.metrics import ScoredLabel
from immunoattn.model import ModelConfig, init_params
from immunoattn.synthetic import separable_dataset
from immunoattn.trainer import (
    EarlyStopping,
    EpochStats,
    OptimState,
    TrainConfig,
    adamw_step,
    batch_by_token_budget,
    evaluate_repeated,
    evaluate_scored,
    history_to_csv,
    loss_and_grad,
    prepare_examples,
    train,
)

CFG = ModelConfig(d=8, n_heads=2, hidden=6)


def examples(n, seed=0, d=8, max_len=30):
    recs = separable_dataset(n, seed, min_len=5, max_len=max_len)
    bundles = {b.id: b for b in synthetic_bundles(recs, d, seed)}
    return prepare_examples(recs, bundles)


def close(a, b, tol):
    for name, x in a.items():
        np.testing.assert_allclose(x, getattr(b, name), rtol=0, atol=tol, err_msg=name)


class TestBatching:
    def test_example(self):
        assert batch_by_token_budget([3000, 1500, 800], 4000, int) == [[3000], [1500, 800]]

    def test_oversize_singleton(self):
        assert batch_by_token_budget([100, 5000, 100], 4000, int) == [[100], [5000], [100]]

    def test_exact_fill(self):
        assert batch_by_token_budget([2000, 2000, 1], 4000, int) == [[2000, 2000], [1]]

    def test_empty(self):
        assert batch_by_token_budget([], 4000, int) == []

    def test_budget_respected_and_order_kept(self):
        rng = np.random.default_rng(0)
        items = rng.integers(1, 6000, 200).tolist()
        batches = batch_by_token_budget(items, 4000, int)
        assert [x for b in batches for x in b] == items
        for b in batches:
            assert sum(b) <= 4000 or len(b) == 1


class TestAdamW:
    def _one(self, theta, grad, **kw):
        p = init_params(CFG, 0).map(lambda a: np.full_like(a, theta))
        g = p.map(lambda a: np.full_like(a, grad))
        cfg = TrainConfig(lr=1e-3, weight_decay=0.01, **kw)
        return adamw_step(p, g, OptimState.zeros(p), cfg)

    def test_first_step_value(self):
        new, state = self._one(1.0, 1.0)
        # m_hat = 1, v_hat = 1 -> 1 - 1e-3 * (1 / (1 + 1e-8) + 0.01)
        expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.01)
        assert new.head_b2[0] == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.99899000001, abs=1e-11)
        assert state.t == 1

    def test_zero_stays_zero(self):
        new, _ = self._one(0.0, 0.0)
        for _, a in new.items():
            assert np.all(a == 0)

    def test_tensors_independent(self):
        p = init_params(CFG, 0)
        g = p.zeros_like()
        g.pool_b[:] = 1.0
        new, _ = adamw_step(p, g, OptimState.zeros(p), TrainConfig(weight_decay=0.0))
        for name, a in new.items():
            if name != "pool_b":
                np.testing.assert_array_equal(a, getattr(p, name))
        assert not np.array_equal(new.pool_b, p.pool_b)

    def test_non_finite_gradient(self):
        p = init_params(CFG, 0)
        g = p.zeros_like()
        g.head_w1[0, 0] = np.nan
        with pytest.raises(NumericalError):
            adamw_step(p, g, OptimState.zeros(p), TrainConfig())


class TestLoss:
    def test_zero_head_gives_ln2(self):
        ex = examples(4)
        p = init_params(CFG, 0)
        p.head_w2[:] = 0
        p.head_b2[:] = 0
        loss, _ = loss_and_grad(ex, p, CFG)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_duplicated_batch_same_loss(self):
        ex = examples(3)
        p = init_params(CFG, 1)
        l1, g1 = loss_and_grad(ex, p, CFG, 7)
        l2, g2 = loss_and_grad(ex + ex, p, CFG, 7)
        assert l1 == pytest.approx(l2, abs=1e-12)
        close(g1, g2, 1e-12)

    def test_batch_gradient_is_mean(self):
        ex = examples(5)
        p = init_params(CFG, 2)
        _, g = loss_and_grad(ex, p, CFG, 3)
        singles = [loss_and_grad([e], p, CFG, 3)[1] for e in ex]
        mean = p.zeros_like()
        for s in singles:
            for name, acc in mean.items():
                acc += getattr(s, name) / len(ex)
        close(g, mean, 1e-12)

    def test_empty_batch(self):
        with pytest.raises(DataError):
            loss_and_grad([], init_params(CFG, 0), CFG)


def test_grad_accumulation_matches_full_batch():
    ex = examples(6, max_len=12)
    valid = examples(2, seed=5, max_len=12)
    total = sum(len(e) for e in ex)
    # budget fits everything -> one batch; budget split in two with grad_accum=2 -> same single update
    full = train(ex, valid, CFG, TrainConfig(max_epochs=1, max_tokens_per_batch=total))
    halves = batch_by_token_budget(ex, total // 2 + 12)
    assert len(halves) <= 2
    accum = train(ex, valid, CFG, TrainConfig(max_epochs=1, max_tokens_per_batch=total // 2 + 12, grad_accum=2))
    close(full.checkpoint.params, accum.checkpoint.params, 1e-12)


class TestEarlyStopping:
    def test_declining_stops_after_patience(self):
        s = EarlyStopping(1)
        assert s.update(0.7, 1)
        assert not s.update(0.6, 2)
        assert s.should_stop and s.best_epoch == 1

    def test_equal_is_not_improvement(self):
        s = EarlyStopping(2)
        s.update(0.7, 1)
        s.update(0.7, 2)
        assert s.bad_epochs == 1 and s.best_epoch == 1

    def test_train_keeps_best_epoch(self):
        ex, valid = examples(6), examples(3, seed=9)
        scores = iter([0.7, 0.6, 0.5])
        res = train(ex, valid, CFG, TrainConfig(max_epochs=10, patience=2), validate=lambda p: next(scores))
        assert res.stopped_early and res.best_epoch == 1 and len(res.history) == 3

    def test_single_epoch(self):
        res = train(examples(4), examples(2, seed=3), CFG, TrainConfig(max_epochs=1))
        assert len(res.history) == 1 and not res.stopped_early

    def test_deterministic(self):
        ex, valid = examples(5), examples(2, seed=3)
        a = train(ex, valid, CFG, TrainConfig(max_epochs=2, seed=4))
        b = train(ex, valid, CFG, TrainConfig(max_epochs=2, seed=4))
        close(a.checkpoint.params, b.checkpoint.params, 0)

    def test_empty_partition(self):
        with pytest.raises(DataError):
            train(examples(3), [], CFG)


def test_history_csv():
    text = history_to_csv([EpochStats(1, 0.5, 0.75)])
    assert text == "epoch,train_loss,valid_acc\n1,0.5,0.75\n"


class TestRepeatedEvaluation:
    def _scored(self, n):
        rng = np.random.default_rng(0)
        return [ScoredLabel(f"s{i}", float(rng.random()), i % 2) for i in range(n)]

    def test_full_fraction_zero_std(self):
        reports, (mean, std) = evaluate_scored(self._scored(40), n_repeats=10, fraction=1.0, k=5)
        assert len(reports) == 10
        assert all(v == 0 for v in std.values() if v is not None)

    def test_subsample_size(self):
        reports, _ = evaluate_scored(self._scored(100), n_repeats=10, fraction=0.5)
        assert all(r.n == 50 for r in reports)
        reports, _ = evaluate_scored(self._scored(101), n_repeats=3, fraction=0.5)
        assert all(r.n == 51 for r in reports)

    def test_seeded(self):
        s = self._scored(60)
        assert evaluate_scored(s, seed=3) == evaluate_scored(s, seed=3)
        assert evaluate_scored(s, seed=3)[0] != evaluate_scored(s, seed=4)[0]

    def test_end_to_end(self):
        ex = examples(12)
        ckpt = Checkpoint(CFG, init_params(CFG, 0))
        reports, (mean, _) = evaluate_repeated(ex, ckpt, n_repeats=2, fraction=0.5, k=3)
        assert len(reports) == 2 and mean["n"] == 6

    def test_bad_arguments(self):
        ckpt = Checkpoint(CFG, init_params(CFG, 0))
        with pytest.raises(DataError):
            evaluate_repeated([], ckpt)
        with pytest.raises(DataError):
            evaluate_repeated(examples(2), ckpt, fraction=0.0)


def test_missing_bundle():
    recs = separable_dataset(2, 0, min_len=5, max_len=10)
    with pytest.raises(DataError, match="no embedding bundle"):
        prepare_examples(recs, {})
