import dataclasses
import math

import numpy as np
import pytest

import harp
from harp.errors import ContractError, NumericError, SearchError
from harp.model import gqa_attention, rmsnorm
from harp.pruning import (
    DEFAULT_GRID,
    AlphaSchedule,
    PruneSpec,
    _smallest_with_high_ties,
    bi_score,
    build_importance_report,
    hessian_importance,
    scale_directional_derivative,
    search_alpha,
    select_layers,
    similarity_score,
)

from oracles import brute_force_schedule


@pytest.fixture(scope="module")
def thin32_ckpt():
    cfg = harp.ModelConfig(
        num_layers=32, hidden_size=64, ffn_size=128, num_query_heads=8,
        num_kv_heads=2, head_dim=8, vocab_size=256, max_seq_len=512,
    )
    return harp.generate_model(cfg, 1)


class TestPruneSpec:
    def test_sorted_and_unique(self):
        spec = PruneSpec((3, 1, 2))
        assert spec.layer_indices == (1, 2, 3)
        with pytest.raises(ContractError):
            PruneSpec((1, 1))
        with pytest.raises(ContractError):
            PruneSpec((-1,))
        with pytest.raises(ContractError):
            PruneSpec((1,), strategy="bogus")

    def test_positional_strategies_must_match_indices(self):
        PruneSpec((6, 7), "top_p").validate(8)
        PruneSpec((0, 1), "bottom_p").validate(8)
        with pytest.raises(ContractError):
            PruneSpec((5, 7), "top_p").validate(8)
        with pytest.raises(ContractError):
            PruneSpec((1, 2), "bottom_p").validate(8)


class TestAlphaSchedule:
    def test_round_trip_and_layer_mapping(self, tmp_path):
        sched = AlphaSchedule(alphas=(0.8, 0.2, 0.0), layer_indices=(5, 6, 7), corpus_digest="c", checkpoint_digest="k")
        assert sched.by_layer == {7: 0.8, 6: 0.2, 5: 0.0}
        path = tmp_path / "s.json"
        sched.save(path)
        again = AlphaSchedule.load(path)
        assert again == sched

    def test_grid_membership_enforced(self):
        with pytest.raises(ContractError):
            AlphaSchedule(alphas=(0.55,), layer_indices=(3,))
        with pytest.raises(ContractError):
            AlphaSchedule(alphas=(0.5, 0.5), layer_indices=(3,))


class TestSelectLayers:
    def test_top_p_picks_highest(self, thin32_ckpt):
        spec = select_layers("top_p", 8, thin32_ckpt)
        assert spec.layer_indices == tuple(range(24, 32))
        assert spec.strategy == "top_p"

    def test_bottom_p_picks_lowest(self, thin32_ckpt):
        assert select_layers("bottom_p", 8, thin32_ckpt).layer_indices == tuple(range(8))

    def test_p_zero_empty_for_every_strategy(self, mini_ckpt, corpus_2k):
        for strategy in ("top_p", "bottom_p", "hessian", "similarity"):
            assert select_layers(strategy, 0, mini_ckpt, corpus_2k).layer_indices == ()

    def test_top_and_bottom_partition_all_layers(self, mini_ckpt):
        n = mini_ckpt.config.num_layers
        top = select_layers("top_p", n // 2, mini_ckpt).layer_indices
        bottom = select_layers("bottom_p", n - n // 2, mini_ckpt).layer_indices
        assert sorted(top + bottom) == list(range(n))

    def test_p_out_of_range(self, mini_ckpt):
        with pytest.raises(ContractError):
            select_layers("top_p", 5, mini_ckpt)

    def test_data_driven_strategies_need_corpus(self, mini_ckpt):
        with pytest.raises(ContractError):
            select_layers("hessian", 2, mini_ckpt)

    def test_ties_break_toward_higher_layer(self):
        assert _smallest_with_high_ties([1.0, 1.0, 0.5, 1.0], 2) == (2, 3)
        assert _smallest_with_high_ties([0.3, 0.3, 0.3, 0.3], 2) == (2, 3)

    def test_metric_strategies_return_valid_specs(self, mini_ckpt, corpus_2k):
        for strategy in ("hessian", "similarity"):
            spec = select_layers(strategy, 2, mini_ckpt, corpus_2k, window_size=64)
            again = select_layers(strategy, 2, mini_ckpt, corpus_2k, window_size=64)
            assert spec == again
            assert spec.p == 2
            assert all(0 <= i < 4 for i in spec.layer_indices)


class TestBiScore:
    def test_identical_negated_orthogonal(self):
        h = np.random.default_rng(0).standard_normal((5, 3))
        assert bi_score(h, h) == pytest.approx(0.0, abs=1e-12)
        assert bi_score(h, -h) == pytest.approx(2.0, abs=1e-12)
        a = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([[0.0, 3.0], [-1.0, 0.0]])
        assert bi_score(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_zero_row_rejected(self):
        with pytest.raises(ContractError):
            bi_score(np.zeros((2, 2)), np.ones((2, 2)))


class TestSimilarityScore:
    def test_zero_output_projection_scores_zero(self, mini_ckpt, corpus_2k):
        ck = dataclasses.replace(mini_ckpt)
        ck.layers = list(mini_ckpt.layers)
        ck.layers[1] = dataclasses.replace(
            mini_ckpt.layers[1], w_o=np.zeros_like(mini_ckpt.layers[1].w_o)
        )
        assert similarity_score(ck, 1, corpus_2k, window_size=64) == pytest.approx(0.0, abs=1e-12)

    def test_scale_invariance_of_definition(self):
        x = np.random.default_rng(1).standard_normal((6, 4))
        assert bi_score(x, 2.0 * x) == pytest.approx(0.0, abs=1e-12)

    def test_matches_capture_oracle(self, mini_ckpt):
        """Recompute the sub-block output from the captured input by hand."""
        tokens = np.random.default_rng(2).integers(0, 256, 3)
        corpus = harp.tokenize(bytes(tokens.astype(np.uint8)), "three")
        layer = 2
        got = similarity_score(mini_ckpt, layer, corpus, window_size=3, max_windows=1)
        res = harp.forward(mini_ckpt, tokens, capture_hidden=True)
        x = res.hidden_states[layer]
        lw = mini_ckpt.layers[layer]
        y = x + gqa_attention(rmsnorm(x, lw.attn_norm), lw, mini_ckpt.config)[0]
        cos = [
            float(x[t] @ y[t] / (np.linalg.norm(x[t]) * np.linalg.norm(y[t])))
            for t in range(3)
        ]
        assert got == pytest.approx(1.0 - sum(cos) / 3.0, abs=1e-6)

    def test_stripped_layer_rejected(self, mini_ckpt, corpus_2k):
        stripped, _ = harp.strip(mini_ckpt, PruneSpec((3,), "top_p"))
        with pytest.raises(ContractError):
            similarity_score(stripped, 3, corpus_2k)


class TestDirectionalDerivative:
    def test_quadratic_surrogate_matches_analytic(self):
        w = 0.7
        loss = lambda c: (c * w - 1.0) ** 2
        analytic = 2.0 * w * (w - 1.0)
        got = scale_directional_derivative(loss, epsilon=1e-2)
        assert abs(got - analytic) / abs(analytic) < 1e-3

    def test_second_order_convergence_on_smooth_loss(self):
        # Cubic term supplies a nonzero third derivative; a pure quadratic has
        # zero truncation error, which would make the slope meaningless.
        w = 0.9
        loss = lambda c: (c * w - 1.0) ** 2 + 0.3 * (c * w) ** 3
        exact = 2.0 * w * (w - 1.0) + 0.9 * w**3
        eps = np.array([0.2, 0.1, 0.05, 0.025])
        errs = np.array([abs(scale_directional_derivative(loss, e) - exact) for e in eps])
        slope = np.polyfit(np.log(eps), np.log(errs), 1)[0]
        assert 1.7 <= slope <= 2.3

    def test_richardson_error_drops_fourfold(self):
        w = 1.3
        loss = lambda c: (c * w - 1.0) ** 2 + 0.3 * (c * w) ** 3
        d1 = scale_directional_derivative(loss, 1e-2)
        d2 = scale_directional_derivative(loss, 5e-3)
        richardson = (4.0 * d2 - d1) / 3.0
        ratio = abs(d1 - richardson) / abs(d2 - richardson)
        assert 3.5 <= ratio <= 4.5

    def test_epsilon_bounds(self):
        with pytest.raises(ContractError):
            scale_directional_derivative(lambda c: c, epsilon=0.0)
        with pytest.raises(ContractError):
            scale_directional_derivative(lambda c: c, epsilon=0.6)
        with pytest.raises(NumericError):
            scale_directional_derivative(lambda c: float("nan"), epsilon=0.1)


class TestHessianImportance:
    def test_skipped_layer_with_alpha_zero_scores_exactly_zero(self, mini_ckpt, corpus_2k):
        spec = PruneSpec((3,), "top_p")
        value = hessian_importance(
            mini_ckpt, 3, corpus_2k, prune_spec=spec, alphas={3: 0.0},
            window_size=64, max_tokens=512,
        )
        assert value == 0.0

    def test_positive_on_live_layer(self, mini_ckpt, corpus_2k):
        value = hessian_importance(mini_ckpt, 0, corpus_2k, window_size=64, max_tokens=512)
        assert value > 0.0

    def test_stripped_layer_rejected(self, mini_ckpt, corpus_2k):
        stripped, _ = harp.strip(mini_ckpt, PruneSpec((3,), "top_p"))
        with pytest.raises(ContractError):
            hessian_importance(stripped, 3, corpus_2k)


class TestImportanceReport:
    def test_fields_and_ranges(self, mini_ckpt, corpus_2k):
        report = build_importance_report(
            mini_ckpt, corpus_2k, window_size=64, max_windows=2, hessian_max_tokens=512
        )
        assert [r.layer for r in report] == list(range(4))
        for r in report:
            assert 0.0 <= r.bi <= 2.0
            assert 0.0 <= r.similarity <= 2.0
            assert r.hessian >= 0.0
            assert -1.0 <= r.sim_hidden <= 1.0


class TestSearchAlpha:
    def test_p_zero_empty_schedule_no_evaluations(self, mini_ckpt, corpus_2k):
        schedule, trace = search_alpha(mini_ckpt, PruneSpec(()), corpus_2k)
        assert schedule.alphas == () and trace == []

    def test_p1_matches_brute_force_oracle(self, mini_ckpt, corpus_2k):
        spec = PruneSpec((3,), "top_p")
        schedule, trace = search_alpha(
            mini_ckpt, spec, corpus_2k, window_size=128, max_tokens=1024
        )
        assert len(trace) == 11
        want, visited = brute_force_schedule(
            mini_ckpt, spec, corpus_2k, DEFAULT_GRID, 128, None, 1024
        )
        assert list(schedule.alphas) == want
        for t, (layer, alpha, ppl) in zip(trace, visited):
            assert (t.layer, t.alpha) == (layer, alpha)
            assert t.ppl == ppl  # determinism makes re-evaluation bitwise equal
        ppls = [t.ppl for t in trace]
        assert schedule.by_layer[3] == trace[int(np.argmin(ppls))].alpha

    def test_greedy_dominance_from_trace(self, mini_ckpt, corpus_2k):
        spec = PruneSpec((2, 3), "top_p")
        schedule, trace = search_alpha(
            mini_ckpt, spec, corpus_2k, window_size=128, max_tokens=1024
        )
        all_ones = next(t.ppl for t in trace if t.layer == 3 and t.alpha == 1.0)
        chosen_last = next(
            t.ppl for t in trace if t.layer == 2 and t.alpha == schedule.by_layer[2]
        )
        assert chosen_last <= all_ones
        assert len(trace) == 22

    def test_search_determinism(self, mini_ckpt, corpus_2k):
        spec = PruneSpec((3,), "top_p")
        a = search_alpha(mini_ckpt, spec, corpus_2k, window_size=128, max_tokens=512)
        b = search_alpha(mini_ckpt, spec, corpus_2k, window_size=128, max_tokens=512)
        assert a[0] == b[0]
        assert [(t.layer, t.alpha, t.ppl) for t in a[1]] == [(t.layer, t.alpha, t.ppl) for t in b[1]]

    def test_schedule_records_digests(self, mini_ckpt, corpus_2k):
        spec = PruneSpec((3,), "top_p")
        schedule, _ = search_alpha(mini_ckpt, spec, corpus_2k, window_size=128, max_tokens=512)
        assert schedule.corpus_digest == corpus_2k.digest
        assert schedule.checkpoint_digest == mini_ckpt.digest()

    def test_failed_candidates_are_skipped_with_nan(self, mini_ckpt, corpus_2k, monkeypatch):
        import harp.pruning as pruning_mod

        real = pruning_mod.perplexity

        def flaky(ckpt, corpus, spec, alphas, **kw):
            if any(abs(a - 0.3) < 1e-12 for a in dict(alphas).values()):
                raise NumericError("synthetic failure")
            return real(ckpt, corpus, spec, alphas, **kw)

        monkeypatch.setattr(pruning_mod, "perplexity", flaky)
        spec = PruneSpec((3,), "top_p")
        schedule, trace = search_alpha(
            mini_ckpt, spec, corpus_2k, window_size=128, max_tokens=512
        )
        nan_rows = [t for t in trace if math.isnan(t.ppl)]
        assert len(nan_rows) == 1 and nan_rows[0].alpha == 0.3
        assert schedule.by_layer[3] != 0.3

    def test_all_candidates_failing_raises(self, mini_ckpt, corpus_2k, monkeypatch):
        import harp.pruning as pruning_mod

        def always_fail(*a, **k):
            raise NumericError("boom")

        monkeypatch.setattr(pruning_mod, "perplexity", always_fail)
        with pytest.raises(SearchError, match="layer 3"):
            search_alpha(mini_ckpt, PruneSpec((3,), "top_p"), corpus_2k)

    def test_bad_grid_rejected(self, mini_ckpt, corpus_2k):
        with pytest.raises(ContractError):
            search_alpha(mini_ckpt, PruneSpec((3,), "top_p"), corpus_2k, grid=())
        with pytest.raises(ContractError):
            search_alpha(mini_ckpt, PruneSpec((3,), "top_p"), corpus_2k, grid=(0.5, 1.5))
