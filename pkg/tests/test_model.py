"""Transformer contracts: init, causality, cache coherence, bypass, loss."""

import math

import numpy as np
import pytest

from specprune.corpus import Batch
from specprune.errors import CapacityError, ConfigError, UsageError
from specprune.model import (
    KvCache,
    Model,
    ModelConfig,
    SublayerId,
    SublayerKind,
    forward_logits,
    forward_train,
    init_model,
    loss_on_batch,
)
from specprune.tensor import Tensor

from conftest import tiny_config


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=3).validate()

    def test_tiny_context_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(max_context=1).validate()


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = init_model(tiny_config())
        b = init_model(tiny_config())
        for key in a.params:
            assert np.array_equal(a.params[key].data, b.params[key].data)

    def test_different_seeds_differ(self):
        a = init_model(tiny_config(rng_seed=1))
        b = init_model(tiny_config(rng_seed=2))
        assert not np.array_equal(a.params["embed"].data, b.params["embed"].data)

    def test_forward_shape_and_finite(self):
        m = init_model(tiny_config())
        logits, _ = forward_logits(m, [1, 2, 3])
        assert logits.shape == (3, 257)
        assert np.isfinite(logits).all()


class TestForward:
    def test_incremental_matches_full(self, tiny_model):
        rng = np.random.default_rng(5)
        tokens = rng.integers(0, 257, size=16).tolist()
        full, _ = forward_logits(tiny_model, tokens)
        cache = KvCache(tiny_model)
        rows = []
        for t in tokens:
            r, cache = forward_logits(tiny_model, [t], cache)
            rows.append(r[0])
        inc = np.stack(rows)
        assert np.abs(full - inc).max() < 1e-4

    def test_incremental_matches_full_f64(self, tiny_model):
        m = tiny_model.astype(np.float64)
        tokens = list(range(10))
        full, _ = forward_logits(m, tokens)
        cache = KvCache(m)
        a, cache = forward_logits(m, tokens[:4], cache)
        b, cache = forward_logits(m, tokens[4:], cache)
        inc = np.vstack([a, b])
        assert np.abs(full - inc).max() < 1e-10

    def test_causality(self, tiny_model):
        rng = np.random.default_rng(6)
        tokens = rng.integers(0, 257, size=12)
        base, _ = forward_logits(tiny_model, tokens.tolist())
        permuted = tokens.copy()
        permuted[8:] = permuted[8:][::-1]  # only positions > 7 change
        after, _ = forward_logits(tiny_model, permuted.tolist())
        assert np.array_equal(base[:8], after[:8])

    def test_causality_train_path(self, tiny_model):
        rng = np.random.default_rng(7)
        tokens = rng.integers(0, 257, size=(1, 12))
        base = forward_train(tiny_model, tokens).data
        permuted = tokens.copy()
        permuted[0, 9:] = permuted[0, 9:][::-1]
        after = forward_train(tiny_model, permuted).data
        assert np.array_equal(base[0, :9], after[0, :9])

    def test_decode_path_matches_train_path(self, tiny_model):
        tokens = list(range(8))
        dec, _ = forward_logits(tiny_model, tokens)
        tra = forward_train(tiny_model, np.array([tokens])).data[0]
        assert np.abs(dec - tra).max() < 1e-4

    def test_empty_mask_is_head_of_embeddings(self):
        m = init_model(tiny_config()).with_mask(frozenset())
        tokens = [3, 1, 4]
        logits, _ = forward_logits(m, tokens)
        p = {k: t.data for k, t in m.params.items()}
        h = p["embed"][tokens] + p["pos"][:3]
        mean = h.mean(-1, keepdims=True)
        c = h - mean
        norm = c / np.sqrt((c * c).mean(-1, keepdims=True) + 1e-5)
        want = (norm * p["final_norm.gain"] + p["final_norm.bias"]) @ p["embed"].T
        assert np.array_equal(logits, want)

    def test_context_overflow(self, tiny_model):
        with pytest.raises(CapacityError):
            forward_logits(tiny_model, list(range(33)) + [0] * 4)

    def test_bad_token_id(self, tiny_model):
        with pytest.raises(IndexError):
            forward_logits(tiny_model, [999])


class TestBypass:
    def test_disabling_equals_zeroed_output_projection(self):
        m = init_model(tiny_config(rng_seed=3))
        sub = SublayerId(1, SublayerKind.ATTENTION)
        masked = m.with_mask(m.active_mask - {sub})

        zeroed_params = dict(m.params)
        zeroed_params["layer1.attn.wo"] = Tensor(np.zeros_like(m.params["layer1.attn.wo"].data))
        zeroed = Model(m.config, zeroed_params, m.active_mask)

        tokens = [5, 6, 7, 8]
        a, _ = forward_logits(masked, tokens)
        b, _ = forward_logits(zeroed, tokens)
        assert np.array_equal(a, b)

    def test_disabling_ffn_equals_zeroed_down_projection(self):
        m = init_model(tiny_config(rng_seed=4))
        sub = SublayerId(0, SublayerKind.FFN)
        masked = m.with_mask(m.active_mask - {sub})
        zeroed_params = dict(m.params)
        zeroed_params["layer0.ffn.w2"] = Tensor(np.zeros_like(m.params["layer0.ffn.w2"].data))
        zeroed = Model(m.config, zeroed_params, m.active_mask)
        a, _ = forward_logits(masked, [1, 2, 3])
        b, _ = forward_logits(zeroed, [1, 2, 3])
        assert np.array_equal(a, b)

    def test_mask_changes_output(self, tiny_model):
        masked = tiny_model.with_mask(
            tiny_model.active_mask - {SublayerId(1, SublayerKind.ATTENTION)}
        )
        a, _ = forward_logits(tiny_model, [1, 2, 3])
        b, _ = forward_logits(masked, [1, 2, 3])
        assert not np.array_equal(a, b)


class TestLoss:
    def test_uniform_logit_model_loss(self):
        # zeroed embeddings make logits exactly uniform
        m = init_model(tiny_config())
        params = dict(m.params)
        params["embed"] = Tensor(np.zeros_like(m.params["embed"].data))
        uniform = Model(m.config, params, frozenset())
        batch = Batch(np.array([[1, 2, 3]]), np.array([[2, 3, 4]]))
        loss = loss_on_batch(uniform, batch).item()
        assert loss / 3 == pytest.approx(math.log(257), rel=1e-6)

    def test_hand_computed_single_pair(self, tiny_model):
        batch = Batch(np.array([[7]]), np.array([[9]]))
        logits, _ = forward_logits(tiny_model, [7])
        row = logits[0].astype(np.float64)
        want = np.log(np.exp(row - row.max()).sum()) + row.max() - row[9]
        got = loss_on_batch(tiny_model, batch).item()
        assert got == pytest.approx(want, rel=1e-5)

    def test_duplicated_batch_doubles_loss(self, tiny_model):
        m = tiny_model.astype(np.float64)
        one = Batch(np.array([[1, 2, 3, 4]]), np.array([[2, 3, 4, 5]]))
        two = Batch(np.tile(one.inputs, (2, 1)), np.tile(one.targets, (2, 1)))
        assert loss_on_batch(m, two).item() == pytest.approx(
            2 * loss_on_batch(m, one).item(), rel=1e-12
        )

    def test_empty_batch_rejected(self, tiny_model):
        with pytest.raises(UsageError):
            loss_on_batch(tiny_model, Batch(np.zeros((0, 4), int), np.zeros((0, 4), int)))


class TestKvCache:
    def test_truncate_idempotent(self, tiny_model):
        cache = KvCache(tiny_model)
        forward_logits(tiny_model, [1, 2, 3, 4, 5], cache)
        cache.truncate(3)
        assert cache.cached_len == 3
        cache.truncate(3)
        assert cache.cached_len == 3
        assert cache.key(0).shape[1] == 3

    def test_truncate_beyond_length_rejected(self, tiny_model):
        cache = KvCache(tiny_model)
        forward_logits(tiny_model, [1, 2], cache)
        with pytest.raises(UsageError):
            cache.truncate(5)

    def test_truncate_then_refeed_matches(self, tiny_model):
        tokens = [1, 2, 3, 4, 5, 6]
        full, _ = forward_logits(tiny_model, tokens)
        cache = KvCache(tiny_model)
        forward_logits(tiny_model, tokens[:4], cache)
        cache.truncate(2)
        rows, _ = forward_logits(tiny_model, tokens[2:], cache)
        assert np.abs(rows[-1] - full[-1]).max() < 1e-4
