"""Throughput metrics, losslessness verifier, pruning-ordering study."""

import numpy as np
import pytest

from specprune.bench import (
    BenchReport,
    bench,
    check_accounting,
    lossless_test,
    prune_ordering_study,
    restricted_distributions,
)
from specprune.errors import BenchError, UsageError
from specprune.fit import accumulate_fit
from specprune.corpus import sample_batch
from specprune.model import SublayerId, SublayerKind, init_model
from specprune.pruning import PruneSet, build_draft
from specprune.specdec import GenerationParams

from conftest import tiny_config


@pytest.fixture(scope="module")
def models():
    target = init_model(
        tiny_config(n_layers=4, d_model=32, n_heads=4, d_ff=64, max_context=64, rng_seed=29)
    )
    prune = PruneSet(
        frozenset({SublayerId(2, SublayerKind.ATTENTION), SublayerId(1, SublayerKind.FFN)}),
        0.25, 0.25,
    )
    return target, build_draft(target, prune), prune


@pytest.fixture(scope="module")
def small_report(models):
    target, draft, prune = models
    params = GenerationParams(k=4, max_len=15, mode="greedy", eos_token=None)
    prompts = [[1, 2, 3], [7, 8], [20, 30, 40, 50]]
    return bench(target, draft, prompts, params, repeats=2, prune_set=prune)


class TestBench:
    def test_identical_outputs_in_greedy(self, small_report):
        assert small_report.spec.tokens == small_report.vanilla.tokens

    def test_block_efficiency_bounds(self, small_report):
        k = small_report.params.k
        assert 1.0 <= small_report.spec.block_efficiency <= k + 1

    def test_alpha_in_unit_interval(self, small_report):
        assert 0.0 <= small_report.spec.alpha_token <= 1.0

    def test_round_logs_reconcile_tokens(self, small_report):
        committed = sum(
            len(r["committed"]) for log in small_report.round_logs for r in log
        )
        assert committed == small_report.spec.tokens

    def test_report_separates_timing(self, small_report):
        d = small_report.to_dict()
        assert "speedup" in d["timing"]
        assert "speedup" not in d["deterministic"]
        assert d["deterministic"]["spec"]["tokens"] == small_report.spec.tokens
        assert "1.32x-1.50x" in d["deterministic"]["note"]

    def test_draft_equals_target_block_efficiency_exact(self, models):
        target, _, _ = models
        t64 = target.astype(np.float64)
        same = build_draft(t64, PruneSet(frozenset(), 0.0, 0.0))
        params = GenerationParams(k=4, max_len=20, mode="greedy", eos_token=None)
        report = bench(t64, same, [[1, 2, 3]], params, repeats=1)
        assert report.spec.block_efficiency == 5.0

    def test_vanilla_speedup_vs_itself_near_one(self, models):
        target, _, _ = models
        same = build_draft(target, PruneSet(frozenset(), 0.0, 0.0))
        params = GenerationParams(k=1, max_len=10, mode="greedy", eos_token=None)
        report = bench(target, same, [[5, 6, 7]], params, repeats=3)
        assert report.vanilla.tokens == report.spec.tokens

    def test_empty_prompts_rejected(self, models):
        target, draft, _ = models
        with pytest.raises(UsageError):
            bench(target, draft, [], GenerationParams(), repeats=1)


class TestAccounting:
    def test_passes_on_real_run(self, models):
        from specprune.specdec import spec_generate

        target, draft, _ = models
        params = GenerationParams(k=3, max_len=17, mode="sample", seed=1, eos_token=None)
        check_accounting(spec_generate(target, draft, [1, 2], params))

    def test_catches_forged_counts(self, models):
        from specprune.specdec import spec_generate

        target, draft, _ = models
        params = GenerationParams(k=3, max_len=12, mode="greedy", eos_token=None)
        result = spec_generate(target, draft, [1, 2], params)
        result.target_calls += 1
        with pytest.raises(BenchError):
            check_accounting(result)


class TestLossless:
    def test_exact_branch_tiny_deviation(self, models):
        target, draft, _ = models
        res = lossless_test(target, draft, [1, 2, 3], n_samples=4000, m=8, seed=0)
        assert res.exact_max_dev < 1e-12
        assert not res.underpowered  # 4000 >= 10 * 8^2

    def test_underpowered_warning(self, models):
        target, draft, _ = models
        with pytest.warns(UserWarning, match="underpowered"):
            res = lossless_test(target, draft, [1, 2], n_samples=100, m=8, seed=0)
        assert res.underpowered

    def test_draft_equals_target_tv_shrinks(self, models):
        target, _, _ = models
        same = build_draft(target, PruneSet(frozenset(), 0.0, 0.0))
        small = lossless_test(target, same, [3, 4], n_samples=2000, m=8, seed=1)
        large = lossless_test(target, same, [3, 4], n_samples=100_000, m=8, seed=1)
        assert large.tv_distance < small.tv_distance
        assert large.exact_max_dev < 1e-15

    def test_statistical_branch(self, models):
        target, draft, _ = models
        res = lossless_test(target, draft, [9, 9, 9], n_samples=50_000, m=16, seed=2)
        assert res.tv_distance < 0.02
        assert res.chi2_pvalue > 0.001

    def test_restricted_distributions_renormalized(self, models):
        target, draft, _ = models
        p, q, top = restricted_distributions(target, draft, [4, 5], m=8)
        assert len(top) == 8
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert q.sum() == pytest.approx(1.0, abs=1e-12)


class TestOrderingStudy:
    def test_zero_ratio_all_deltas_zero(self, models, corpus):
        target, _, _ = models
        fit = accumulate_fit(
            target, [sample_batch(corpus, 2, 8, np.random.default_rng(0))]
        )
        res = prune_ordering_study(
            target, fit, corpus, ratio=0.0, seeds=[0, 1], n_batches=1,
            batch_size=2, seq_len=8, n_random=2,
        )
        assert res.mean_delta_bottom == 0.0
        assert res.mean_delta_top == 0.0
        assert res.mean_delta_random == 0.0
        assert res.ordering_holds

    def test_rows_cover_seeds(self, models, corpus):
        target, _, _ = models
        fit = accumulate_fit(
            target, [sample_batch(corpus, 2, 8, np.random.default_rng(0))]
        )
        res = prune_ordering_study(
            target, fit, corpus, ratio=0.25, seeds=[5, 6, 7], n_batches=1,
            batch_size=2, seq_len=8, n_random=3,
        )
        assert [r.seed for r in res.rows] == [5, 6, 7]
        d = res.to_dict()
        assert set(d) >= {"ratio", "rows", "mean_delta_bottom", "mean_delta_top", "ordering_holds"}
