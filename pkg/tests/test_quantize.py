"""Memory bank, nearest-item quantization, compression loss, skip path."""

import numpy as np
import pytest

from deformad import numeric as nm
from deformad.numeric.tensor import backward
from deformad.quantize import (
    MemoryBank,
    SkipReducer,
    compression_loss,
    quantize,
    reseed_dead_items,
)


def bank_from(items):
    return MemoryBank(np.asarray(items, dtype=np.float64))


def feature_cube(columns):
    """Stack feature columns into a (1, D, 1, len) cube."""
    arr = np.asarray(columns, dtype=np.float64).T  # (D, n)
    return nm.Tensor(arr.reshape(1, arr.shape[0], 1, arr.shape[1]),
                     dtype=np.float64)


class TestQuantize:
    def test_forced_argmin(self, fp64):
        bank = bank_from([[0.0, 1.0], [0.0, 1.0]])  # items (0,0) and (1,1)
        q = quantize(feature_cube([[0.2, 0.1]]), bank)
        assert q.codes.reshape(-1).tolist() == [0]

    def test_exact_match_returns_item(self, fp64):
        bank = bank_from([[0.0, 1.0], [0.0, 1.0]])
        q = quantize(feature_cube([[1.0, 1.0]]), bank)
        assert q.codes.reshape(-1).tolist() == [1]
        assert np.array_equal(q.z_q.data.reshape(2), [1.0, 1.0])

    def test_tie_breaks_to_lowest_index(self, fp64):
        bank = bank_from([[0.0, 1.0], [0.0, 1.0]])
        q = quantize(feature_cube([[0.5, 0.5]]), bank)
        assert q.codes.reshape(-1).tolist() == [0]

    def test_codes_idempotent_under_requantization(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(4, 6)))
        z_e = nm.Tensor(rng.normal(size=(2, 4, 3, 3)))
        q1 = quantize(z_e, bank)
        q2 = quantize(q1.z_q, bank)
        assert np.array_equal(q1.codes, q2.codes)
        assert np.array_equal(q1.z_q.data, q2.z_q.data)

    def test_usage_counts_sum_to_positions(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(4, 6)))
        z_e = nm.Tensor(rng.normal(size=(2, 4, 5, 7)))
        quantize(z_e, bank)
        assert bank.usage_counts.sum() == 2 * 5 * 7

    def test_read_only_mode_keeps_counts(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(4, 6)))
        quantize(nm.Tensor(rng.normal(size=(1, 4, 2, 2))), bank,
                 update_usage=False)
        assert bank.usage_counts.sum() == 0

    def test_depth_mismatch_rejected(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(4, 6)))
        with pytest.raises(ValueError, match="depth"):
            quantize(nm.Tensor(rng.normal(size=(1, 3, 2, 2))), bank)

    def test_empty_bank_rejected(self):
        with pytest.raises(ValueError):
            MemoryBank(np.zeros((4, 0)))

    def test_straight_through_grads_reach_encoder_side(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(3, 5)))
        raw = rng.normal(size=(1, 3, 2, 2))
        z_e = nm.Tensor(raw, requires_grad=True)
        with nm.Tape():
            q = quantize(z_e, bank)
            loss = (q.straight_through * 2.0).sum()
        backward(loss)
        assert np.allclose(z_e.grad, 2.0)       # copied through
        assert bank.items.grad is None          # decoder path bypasses items


class TestCompressionLoss:
    def test_zero_when_equal(self, fp64, rng):
        z = nm.Tensor(rng.normal(size=(1, 3, 2, 2)))
        assert compression_loss(z, z, 0.25).item() == 0.0

    def test_scalar_hand_value(self, fp64):
        # z_e=1, z_q=0, beta=0.25 -> 1 + 0.25
        z_e = nm.Tensor(np.ones((1, 1, 1, 1)))
        z_q = nm.Tensor(np.zeros((1, 1, 1, 1)))
        assert compression_loss(z_e, z_q, 0.25).item() == pytest.approx(1.25)

    def test_nonnegative_and_zero_iff_equal(self, fp64, rng):
        for _ in range(20):
            a = rng.normal(size=(1, 2, 3, 3))
            b = rng.normal(size=(1, 2, 3, 3))
            val = compression_loss(nm.Tensor(a), nm.Tensor(b), 0.25).item()
            assert val >= 0.0
            assert (val == 0.0) == np.array_equal(a, b)

    def test_gradient_splits_terms(self, fp64, rng):
        # encoder side receives only the beta-commitment gradient
        a = rng.normal(size=(1, 2, 2, 2))
        b = rng.normal(size=(1, 2, 2, 2))
        beta = 0.25
        z_e = nm.Tensor(a, requires_grad=True)
        z_q = nm.Tensor(b, requires_grad=True)
        with nm.Tape():
            loss = compression_loss(z_e, z_q, beta)
        backward(loss)
        n = a.size
        assert np.allclose(z_e.grad, beta * 2.0 * (a - b) / n)
        assert np.allclose(z_q.grad, -2.0 * (a - b) / n)

    def test_commitment_gradient_matches_fd(self, fp64, rng):
        # analytic grad of the full loss w.r.t. z_e must equal the finite
        # difference of the beta-commitment term alone (z_q frozen as c)
        a = rng.normal(size=(1, 2, 2, 2))
        b = rng.normal(size=(1, 2, 2, 2))
        beta = 0.25
        z_e = nm.Tensor(a, requires_grad=True)
        with nm.Tape():
            loss = compression_loss(z_e, nm.Tensor(b), beta)
        backward(loss)

        def commitment_only(z):
            return float(beta * np.mean((z - b) ** 2))

        numeric = nm.numerical_gradient(lambda z: commitment_only(z), [a], 0)
        assert nm.max_relative_error(z_e.grad, numeric) < 1e-4

    def test_shape_mismatch(self, fp64):
        with pytest.raises(ValueError, match="mismatch"):
            compression_loss(nm.Tensor(np.zeros((1, 2, 2, 2))),
                             nm.Tensor(np.zeros((1, 2, 2, 3))), 0.25)


class TestSkipReducer:
    def test_channel_arithmetic(self, fp64):
        skip = SkipReducer(64, 16)
        assert skip.out_channels == 4

    def test_reduction_floor_enforced(self):
        with pytest.raises(ValueError, match=">= 16"):
            SkipReducer(64, 8)

    def test_single_channel_floor(self, fp64):
        assert SkipReducer(8, 16).out_channels == 1

    def test_no_gradient_into_encoder_features(self, fp64, rng):
        skip = SkipReducer(32, 16)
        feats = nm.Tensor(rng.normal(size=(1, 32, 4, 4)), requires_grad=True)
        with nm.Tape():
            out = skip(feats)
            loss = (out * out).sum()
        backward(loss)
        assert feats.grad is None
        assert skip.weight.grad is not None


class TestReseeding:
    def test_all_used_unchanged(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(2, 3)))
        before = bank.items.data.copy()
        bank.usage_counts[:] = 1
        reseed_dead_items(bank, rng.normal(size=(5, 2)), 1)
        assert np.array_equal(bank.items.data, before)
        assert bank.usage_counts.sum() == 0  # epoch counters reset

    def test_dead_item_takes_query_value(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(2, 2)))
        bank.usage_counts[:] = [5, 0]
        query = np.array([[7.0, -3.0]])
        reseed_dead_items(bank, query, 1)
        assert np.array_equal(bank.items.data[:, 1], [7.0, -3.0])

    def test_threshold_requires_consecutive_epochs(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(2, 2)))
        before = bank.items.data.copy()
        queries = np.array([[7.0, -3.0]])
        bank.usage_counts[:] = [5, 0]
        reseed_dead_items(bank, queries, 3)       # stale 1 epoch
        assert np.array_equal(bank.items.data, before)
        bank.usage_counts[:] = [5, 0]
        reseed_dead_items(bank, queries, 3)       # stale 2 epochs
        assert np.array_equal(bank.items.data, before)
        bank.usage_counts[:] = [5, 0]
        reseed_dead_items(bank, queries, 3)       # stale 3: reseed fires
        assert np.array_equal(bank.items.data[:, 1], [7.0, -3.0])

    def test_single_item_bank_never_reseeded(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(3, 1)))
        before = bank.items.data.copy()
        quantize(nm.Tensor(rng.normal(size=(1, 3, 2, 2))), bank)
        reseed_dead_items(bank, rng.normal(size=(4, 3)), 1)
        assert np.array_equal(bank.items.data, before)

    def test_empty_queries_rejected(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(2, 2)))
        with pytest.raises(ValueError, match="nonempty"):
            reseed_dead_items(bank, np.zeros((0, 2)), 1)


class TestBankGradients:
    def test_bank_items_learn_from_embedding_term(self, fp64, rng):
        bank = MemoryBank(rng.normal(size=(3, 4)))
        z_e = nm.Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        with nm.Tape():
            q = quantize(z_e, bank)
            loss = compression_loss(q.z_e, q.z_q, 0.25)
        backward(loss)
        assert bank.items.grad is not None
        assert np.any(bank.items.grad != 0.0)
        # items untouched by any query receive zero gradient
        unused = np.setdiff1d(np.arange(4), np.unique(q.codes))
        for idx in unused:
            assert np.all(bank.items.grad[:, idx] == 0.0)
