"""Sensitivity scoring: conventions, ranking, selection, report, curvature."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specprune.corpus import Batch, sample_batch
from specprune.errors import ConfigError, UsageError
from specprune.fit import (
    FitTable,
    accumulate_fit,
    fit_from_contributions,
    fit_report,
    format_report_table,
    kl_quadratic_check,
    parse_report,
    rank_sublayers,
    select_prune_set,
)
from specprune.model import SublayerId, SublayerKind, init_model
from specprune.tensor import backward, trace
from specprune.model import loss_on_batch

from conftest import tiny_config

ATTN = SublayerKind.ATTENTION
FFN = SublayerKind.FFN


def _table(scores, **kw):
    defaults = dict(n_batches=1, n_samples=1, convention="minibatch")
    defaults.update(kw)
    return FitTable(scores=scores, **defaults)


def _batches(corpus, n, batch_size=2, seq_len=8, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_batch(corpus, batch_size, seq_len, rng) for _ in range(n)]


class TestAccumulation:
    def test_hand_arithmetic_squared_norm(self):
        # one batch whose only sublayer gradient is [3, 4] -> T = 25 / 1
        sub = SublayerId(0, ATTN)
        contribution = {sub: float(np.dot([3.0, 4.0], [3.0, 4.0]))}
        scores = fit_from_contributions([contribution], normalizer=1)
        assert scores[sub] == 25.0

    def test_loss_scaled_by_two_quadruples_scores(self, corpus):
        model = init_model(tiny_config()).astype(np.float64)
        batches = _batches(corpus, 3)
        base = accumulate_fit(model, batches)
        scaled = accumulate_fit(model, batches, loss_scale=2.0)
        for sub in base.scores:
            assert scaled.scores[sub] == pytest.approx(4.0 * base.scores[sub], rel=1e-12)

    def test_batch_convention_matches_own_oracle(self, corpus):
        """Default mode accumulates the minibatch-gradient norm per batch."""
        model = init_model(tiny_config()).astype(np.float64)
        batches = _batches(corpus, 2)
        table = accumulate_fit(model, batches)
        want = {sub: 0.0 for sub in model.active_mask}
        for batch in batches:
            with trace():
                grads = backward(loss_on_batch(model, batch))
            for sub in want:
                for key, g in grads.items():
                    if key.startswith(f"layer{sub.layer_index}.") and (
                        ".attn." if sub.kind is ATTN else ".ffn."
                    ) in key:
                        want[sub] += float(np.dot(g.ravel(), g.ravel()))
        for sub in want:
            assert table.scores[sub] == pytest.approx(want[sub] / len(batches), rel=1e-12)

    def test_per_sample_convention_matches_per_sample_oracle(self, corpus):
        """Per-sample mode equals a loop of single-row backward passes."""
        model = init_model(tiny_config()).astype(np.float64)
        batches = _batches(corpus, 2, batch_size=3)
        table = accumulate_fit(model, batches, per_sample=True)
        assert table.convention == "per_sample"
        want = {sub: 0.0 for sub in model.active_mask}
        n = 0
        for batch in batches:
            for b in range(batch.inputs.shape[0]):
                n += 1
                row = Batch(batch.inputs[b : b + 1], batch.targets[b : b + 1])
                with trace():
                    grads = backward(loss_on_batch(model, row))
                for sub in want:
                    prefix = f"layer{sub.layer_index}.{'attn' if sub.kind is ATTN else 'ffn'}."
                    want[sub] += sum(
                        float(np.dot(g.ravel(), g.ravel()))
                        for key, g in grads.items()
                        if key.startswith(prefix)
                    )
        for sub in want:
            assert table.scores[sub] == pytest.approx(want[sub] / n, rel=1e-12)

    def test_conventions_differ_on_multi_sample_batches(self, corpus):
        # cross-sample inner products make the two normalizations disagree
        model = init_model(tiny_config()).astype(np.float64)
        batches = _batches(corpus, 2, batch_size=3)
        a = accumulate_fit(model, batches)
        b = accumulate_fit(model, batches, per_sample=True)
        assert any(
            a.scores[s] != pytest.approx(b.scores[s], rel=1e-6) for s in a.scores
        )

    def test_batch_order_invariance_exact(self, corpus):
        model = init_model(tiny_config()).astype(np.float64)
        batches = _batches(corpus, 4)
        forward = accumulate_fit(model, batches)
        backward_order = accumulate_fit(model, batches[::-1])
        for sub in forward.scores:
            assert forward.scores[sub] == backward_order.scores[sub]  # bitwise

    def test_every_active_sublayer_scored(self, corpus):
        model = init_model(tiny_config())
        masked = model.with_mask(model.active_mask - {SublayerId(0, FFN)})
        table = accumulate_fit(masked, _batches(corpus, 1))
        assert set(table.scores) == set(masked.active_mask)
        assert all(v >= 0 for v in table.scores.values())

    def test_needs_batches(self, tiny_model):
        with pytest.raises(UsageError):
            accumulate_fit(tiny_model, [])


class TestRanking:
    def test_spec_ordering_example(self):
        scores = {
            SublayerId(0, ATTN): 5.0,
            SublayerId(1, ATTN): 1.0,
            SublayerId(2, ATTN): 3.0,
            SublayerId(3, ATTN): 2.0,
        }
        order = rank_sublayers(_table(scores))
        assert [s.layer_index for s in order] == [1, 3, 2, 0]

    def test_tie_break_deeper_first_ffn_before_attention(self):
        scores = {
            SublayerId(0, ATTN): 1.0,
            SublayerId(0, FFN): 1.0,
            SublayerId(1, ATTN): 1.0,
            SublayerId(1, FFN): 1.0,
        }
        order = rank_sublayers(_table(scores))
        assert order == [
            SublayerId(1, FFN),
            SublayerId(1, ATTN),
            SublayerId(0, FFN),
            SublayerId(0, ATTN),
        ]

    def test_single_entry(self):
        sub = SublayerId(0, FFN)
        assert rank_sublayers(_table({sub: 7.0})) == [sub]

    @given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_rank_is_ascending(self, values):
        scores = {SublayerId(i, ATTN if i % 2 else FFN): v for i, v in enumerate(values)}
        table = _table(scores)
        order = rank_sublayers(table)
        ranked = [scores[s] for s in order]
        assert ranked == sorted(ranked)

    @given(
        st.lists(
            st.floats(min_value=1e-6, max_value=1e3), min_size=2, max_size=16, unique=True
        ),
        st.floats(min_value=0.1, max_value=10),
    )
    @settings(max_examples=50, deadline=None)
    def test_rank_invariant_under_monotone_transform(self, values, scale):
        scores = {SublayerId(i, ATTN): v for i, v in enumerate(values)}
        transformed = {k: scale * v**1.5 for k, v in scores.items()}
        assert rank_sublayers(_table(scores)) == rank_sublayers(_table(transformed))


class TestSelection:
    def test_spec_selection_example(self):
        scores = {}
        for i, v in enumerate([5.0, 1.0, 3.0, 2.0]):
            scores[SublayerId(i, ATTN)] = v
        for i, v in enumerate([4.0, 6.0, 2.0, 8.0]):
            scores[SublayerId(i, FFN)] = v
        chosen = select_prune_set(_table(scores), 0.5, 0.25).sublayers
        assert chosen == {
            SublayerId(1, ATTN),  # score 1
            SublayerId(3, ATTN),  # score 2
            SublayerId(2, FFN),  # score 2
        }

    def test_zero_ratios_empty(self):
        table = _table({SublayerId(0, ATTN): 1.0, SublayerId(0, FFN): 2.0})
        assert select_prune_set(table, 0.0, 0.0).sublayers == frozenset()

    def test_half_half_on_default_model_prunes_4_plus_4(self, corpus):
        model = init_model(tiny_config(n_layers=8, d_model=16, n_heads=2))
        table = accumulate_fit(model, _batches(corpus, 1))
        chosen = select_prune_set(table, 0.5, 0.5).sublayers
        assert sum(1 for s in chosen if s.kind is ATTN) == 4
        assert sum(1 for s in chosen if s.kind is FFN) == 4

    def test_ratio_one_rejected(self):
        table = _table({SublayerId(0, ATTN): 1.0})
        with pytest.raises(ConfigError):
            select_prune_set(table, 1.0, 0.0)

    @given(st.floats(min_value=0.5, max_value=4.0), st.floats(min_value=0.0, max_value=5.0))
    @settings(max_examples=40, deadline=None)
    def test_selection_is_rank_pure(self, power, shift):
        rng = np.random.default_rng(0)
        scores = {
            SublayerId(i, ATTN if i % 2 else FFN): float(v)
            for i, v in enumerate(rng.uniform(0.1, 10, size=12))
        }
        table = _table(scores)
        monotone = _table({k: (v + shift) ** power for k, v in scores.items()})
        assert (
            select_prune_set(table, 0.5, 0.35).sublayers
            == select_prune_set(monotone, 0.5, 0.35).sublayers
        )


class TestReport:
    def test_log_entry(self):
        table = _table({SublayerId(0, ATTN): 100.0})
        report = fit_report(table)
        assert report["scores"][0]["log10_fit"] == pytest.approx(2.0)

    def test_zero_score_sentinel(self):
        table = _table({SublayerId(0, ATTN): 0.0})
        report = fit_report(table)
        assert report["scores"][0]["log10_fit"] == "-inf"
        assert "-inf" in format_report_table(table)

    def test_roundtrip_through_json(self, corpus):
        model = init_model(tiny_config())
        table = accumulate_fit(model, _batches(corpus, 2), metadata={"corpus": "x"})
        blob = json.dumps(fit_report(table))
        back = parse_report(json.loads(blob))
        assert back.scores == table.scores
        assert back.n_batches == table.n_batches
        assert back.convention == table.convention

    def test_fingerprint_tracks_scores(self):
        a = _table({SublayerId(0, ATTN): 1.0})
        b = _table({SublayerId(0, ATTN): 2.0})
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == _table({SublayerId(0, ATTN): 1.0}).fingerprint()


class TestKlQuadratic:
    def test_ratio_near_one_and_converging(self):
        model = init_model(tiny_config()).astype(np.float64)
        ratios = []
        for eps in (1e-2, 1e-3, 1e-4):
            res = kl_quadratic_check(model, eps, np.random.default_rng(0), n_contexts=2, context_len=5)
            ratios.append(res.ratio)
        assert 0.9 < ratios[-1] < 1.1
        gaps = [abs(r - 1.0) for r in ratios]
        assert gaps[0] >= gaps[1] >= gaps[2]

    def test_quadrupling_with_epsilon_doubling(self):
        model = init_model(tiny_config()).astype(np.float64)
        small = kl_quadratic_check(model, 5e-4, np.random.default_rng(1), n_contexts=2, context_len=5)
        large = kl_quadratic_check(model, 1e-3, np.random.default_rng(1), n_contexts=2, context_len=5)
        assert large.measured_kl == pytest.approx(4.0 * small.measured_kl, rel=0.1)

    def test_zero_direction_on_unused_parameter(self):
        model = init_model(tiny_config()).astype(np.float64)
        # a positional row beyond the context length influences nothing
        direction = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        direction["pos"][-1, :] = 1.0
        res = kl_quadratic_check(
            model, 1e-3, np.random.default_rng(2), n_contexts=2, context_len=5,
            direction=direction,
        )
        assert res.measured_kl == 0.0
        assert res.predicted_kl == 0.0
        assert math.isnan(res.ratio)

    def test_epsilon_zero_rejected(self, tiny_model):
        with pytest.raises(UsageError):
            kl_quadratic_check(tiny_model, 0.0, np.random.default_rng(0))
