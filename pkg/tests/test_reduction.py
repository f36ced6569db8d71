import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import pairwise_similarity_oracle
from ltmp import core
from ltmp.reduction import (
    ReductionTrace,
    ThresholdSet,
    bipartite_partition,
    bipartite_similarity,
    build_trace,
    class_attention_scores,
    importance_scores,
    mean_column_attention_scores,
    merge_tokens,
    ste_mask,
    threshold_mask,
    threshold_mask_ste_grad,
    topk_mask,
    topk_select,
    update_mask,
)


def t(x, dtype=torch.float64):
    return torch.tensor(x, dtype=dtype)


class TestThresholdMask:
    def test_strict_inequality(self):
        assert threshold_mask([0.7, 0.1, 0.4], 0.4).tolist() == [1, 0, 0]

    def test_below_min_keeps_all(self):
        assert threshold_mask([0.7, 0.1, 0.4], 0.05).tolist() == [1, 1, 1]

    def test_at_max_drops_argmax(self):
        assert threshold_mask([0.7, 0.1, 0.4], 0.7).tolist() == [0, 0, 0]

    def test_ste_forward_is_hard(self):
        s = t([0.7, 0.1, 0.4])
        theta = t(0.4).requires_grad_()
        m = ste_mask(s, theta, 0.1)
        assert m.tolist() == [1, 0, 0]
        (g,) = core.grad(m.sum(), [theta])
        sig = torch.sigmoid((s - 0.4) / 0.1)
        np.testing.assert_allclose(float(g), float((-sig * (1 - sig) / 0.1).sum()), rtol=1e-14)

    def test_relaxed_is_sigmoid(self):
        s = t([0.3, 0.5])
        np.testing.assert_allclose(ste_mask(s, t(0.4), 0.1, relaxed=True).numpy(),
                                   torch.sigmoid((s - 0.4) / 0.1).numpy(), rtol=0)


class TestSteGrad:
    def test_at_threshold(self):
        ds, dth = threshold_mask_ste_grad(0.3, 0.3, 0.1)
        assert dth == pytest.approx(-2.5, rel=1e-15)
        assert ds == pytest.approx(2.5, rel=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-3, 10))
    def test_antisymmetric_and_nonpositive(self, s, theta, tau):
        ds, dth = threshold_mask_ste_grad(s, theta, tau)
        assert ds == -dth
        assert dth <= 0

    def test_saturation(self):
        ds, dth = threshold_mask_ste_grad(10.0, 0.0, 0.1)
        assert abs(ds) < 1e-40 and abs(dth) < 1e-40

    def test_matches_autograd(self):
        s, theta = t(0.37).requires_grad_(), t(0.3).requires_grad_()
        gs, gt = core.grad(ste_mask(s, theta, 0.1, relaxed=True), [s, theta])
        ds, dth = threshold_mask_ste_grad(0.37, 0.3, 0.1)
        assert float(gs) == pytest.approx(ds, rel=1e-12)
        assert float(gt) == pytest.approx(dth, rel=1e-12)

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            threshold_mask_ste_grad(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            ThresholdSet(4, tau=0.0)


class TestUpdateMask:
    def test_definition(self):
        assert update_mask([1, 0, 1], [0, 1, 1]).tolist() == [0, 0, 1]

    def test_all_alive_passes_through(self):
        assert update_mask([1, 1, 1], [0, 1, 0]).tolist() == [0, 1, 0]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from([0.0, 1.0]), min_size=1, max_size=12), st.data())
    def test_monotone(self, prev, data):
        new = data.draw(st.lists(st.floats(0, 1), min_size=len(prev), max_size=len(prev)))
        out = update_mask(prev, new)
        assert (out <= np.asarray(prev)).all()
        out_t = update_mask(t(prev), t(new))
        np.testing.assert_array_equal(out_t.numpy(), out)


def _uniform_attn(n, alive, heads=1):
    m = t([float(a) for a in alive])
    return core.masked_softmax(torch.zeros(1, heads, n, n, dtype=torch.float64), m[None, None, None, :])


class TestImportance:
    def test_class_attention_uniform(self):
        attn = _uniform_attn(3, [1, 1, 1])
        np.testing.assert_allclose(class_attention_scores(attn)[0].numpy(), [1 / 3] * 3, rtol=1e-15)

    def test_class_attention_masked_column(self):
        attn = _uniform_attn(4, [1, 1, 0, 1])
        assert float(class_attention_scores(attn)[0, 2]) == 0.0

    def test_mean_column_uniform_two_tokens(self):
        attn = _uniform_attn(2, [1, 1])
        np.testing.assert_allclose(mean_column_attention_scores(attn)[0].numpy(), [0.5, 0.5], rtol=1e-15)

    def test_mean_column_sums_to_one(self):
        rng = np.random.default_rng(3)
        alive = torch.tensor([[True, True, False, True, True, False]])
        attn = core.masked_softmax(t(rng.normal(size=(1, 1, 6, 6))), alive.double()[:, None, None, :])
        s = mean_column_attention_scores(attn, alive)
        assert float(s[alive].sum()) == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_naive_oracles(self, seed):
        rng = np.random.default_rng(seed)
        b, h, n = 2, 3, 7
        alive = rng.random((b, n)) < 0.7
        alive[:, 0] = True
        attn = core.masked_softmax(t(rng.normal(size=(b, h, n, n))), t(alive.astype(float))[:, None, None, :])
        a = attn.numpy()
        cls_ref = np.zeros((b, n))
        mc_ref = np.zeros((b, n))
        for bi in range(b):
            kept = [j for j in range(n) if alive[bi, j]]
            for i in range(n):
                for hh in range(h):
                    cls_ref[bi, i] += a[bi, hh, 0, i]
                    for j in kept:
                        mc_ref[bi, i] += a[bi, hh, j, i]
                mc_ref[bi, i] /= h * len(kept)
        np.testing.assert_allclose(class_attention_scores(attn).numpy(), cls_ref, atol=1e-12, rtol=0)
        np.testing.assert_allclose(mean_column_attention_scores(attn, torch.from_numpy(alive)).numpy(), mc_ref,
                                   atol=1e-12, rtol=0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            importance_scores(_uniform_attn(2, [1, 1]), torch.ones(1, 2, dtype=torch.bool), "entropy")


class TestSimilarity:
    def test_partition_alternates_over_kept(self):
        alive = torch.tensor([[True, True, False, True, True, True]])
        a, b = bipartite_partition(alive)
        # kept order 0,1,3,4,5 -> ranks 0..4; odd ranks 1,4 in A; even ranks 3,5 in B (CLS excluded)
        assert a[0].nonzero().flatten().tolist() == [1, 4]
        assert b[0].nonzero().flatten().tolist() == [3, 5]

    def test_identical_tokens(self):
        keys = t([[[9.0, 9.0], [1.0, 2.0], [1.0, 2.0]]])
        sim = bipartite_similarity(keys, torch.ones(1, 3, dtype=torch.bool))
        assert float(sim.score[0, 1]) == pytest.approx(1.0, abs=1e-15)
        assert int(sim.partner[0, 1]) == 2

    def test_orthogonal_keys(self):
        keys = torch.eye(5, dtype=torch.float64)[None]
        sim = bipartite_similarity(keys, torch.ones(1, 5, dtype=torch.bool))
        assert sim.score[sim.set_a].tolist() == [0.0, 0.0]

    def test_zero_norm_key(self, caplog):
        keys = t([[[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]]])
        with caplog.at_level("WARNING"):
            sim = bipartite_similarity(keys, torch.ones(1, 3, dtype=torch.bool))
        assert float(sim.score[0, 1]) == -1.0
        assert "zero-norm" in caplog.text

    def test_too_few_tokens(self):
        sim = bipartite_similarity(t([[[1.0, 0.0], [0.0, 1.0]]]), torch.ones(1, 2, dtype=torch.bool))
        assert not bool(sim.set_a.any())

    def test_heads_are_averaged(self):
        rng = np.random.default_rng(0)
        k = t(rng.normal(size=(1, 3, 6, 4)))
        alive = torch.ones(1, 6, dtype=torch.bool)
        a = bipartite_similarity(k, alive)
        b = bipartite_similarity(k.mean(1), alive)
        torch.testing.assert_close(a.score, b.score, rtol=0, atol=0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 12), st.data())
    def test_exhaustive_oracle(self, n, data):
        keys = data.draw(arrays(np.float64, (n, 3), elements=st.floats(-5, 5, allow_subnormal=False)))
        alive = [True] + data.draw(st.lists(st.booleans(), min_size=n - 1, max_size=n - 1))
        sim = bipartite_similarity(t(keys)[None], torch.tensor([alive]))
        ref = pairwise_similarity_oracle(keys, alive)
        assert set(sim.set_a[0].nonzero().flatten().tolist()) == set(ref)
        for i, (score, partner) in ref.items():
            assert abs(float(sim.score[0, i]) - score) <= 1e-12
            # ties in cosine may pick another partner with the same score
            j = int(sim.partner[0, i])
            if j != partner:
                assert abs(float(sim.score[0, i]) - ref[i][0]) <= 1e-12


class TestTopk:
    def test_largest(self):
        assert topk_select([3, 1, 2], 2) == {0, 2}

    def test_smallest(self):
        assert topk_select([3, 1, 2], 2, largest=False) == {1, 2}

    def test_zero(self):
        assert topk_select([3, 1, 2], 0) == set()

    def test_tie_goes_to_lower_index(self):
        assert topk_select([5, 5, 1], 1) == {0}
        assert topk_select([1, 5, 1], 1, largest=False) == {0}

    def test_negative_k(self):
        with pytest.raises(ValueError):
            topk_select([1, 2], -1)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            topk_select([1, 2], 3)

    def test_mask_clamps_per_row(self):
        scores = t([[0.1, 0.5, 0.3, 0.9], [0.2, 0.2, 0.2, 0.2]])
        cand = torch.tensor([[False, True, True, True], [False, True, False, False]])
        sel = topk_mask(scores, cand, 2)
        assert sel.tolist() == [[False, True, False, True], [False, True, False, False]]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=2, max_size=20, unique=True), st.data())
    def test_threshold_between_order_statistics_equals_topk(self, scores, data):
        k = data.draw(st.integers(0, len(scores) - 1))
        srt = sorted(scores, reverse=True)
        theta = srt[0] + 1 if k == 0 else (srt[k - 1] + srt[k]) / 2
        kept_by_threshold = set(np.nonzero(threshold_mask(scores, theta))[0].tolist())
        assert kept_by_threshold == topk_select(scores, k)


class TestMerge:
    def test_identical_tokens_keep_value(self):
        x = t([[[0.0, 0.0], [2.0, 3.0], [2.0, 3.0]]])
        sizes = t([[1.0, 1.0, 1.0]])
        src = torch.tensor([[False, True, False]])
        partner = torch.tensor([[0, 2, 0]])
        out, new_sizes = merge_tokens(x, sizes, src, partner)
        assert out[0, 2].tolist() == [2.0, 3.0]
        assert new_sizes[0].tolist() == [1.0, 1.0, 2.0]

    @pytest.mark.parametrize("mode", ["weighted", "pairwise"])
    def test_size_weighted_mean(self, mode):
        v, w = t([1.0, -2.0]), t([5.0, 4.0])
        x = torch.stack([torch.zeros(2, dtype=torch.float64), v, w])[None]
        sizes = t([[1.0, 1.0, 3.0]])
        out, new_sizes = merge_tokens(x, sizes, torch.tensor([[False, True, False]]), torch.tensor([[0, 2, 0]]),
                                      mode)
        if mode == "weighted":
            np.testing.assert_allclose(out[0, 2].numpy(), ((3 * w + v) / 4).numpy(), rtol=1e-15)
        else:
            np.testing.assert_allclose(out[0, 2].numpy(), ((w + v) / 2).numpy(), rtol=1e-15)
        assert float(new_sizes[0, 1:].sum() - sizes[0, 1]) == 4.0

    def test_many_to_one_is_true_mean(self):
        rng = np.random.default_rng(2)
        x = t(rng.normal(size=(1, 5, 3)))
        sizes = t([[1.0, 2.0, 1.0, 1.0, 3.0]])
        src = torch.tensor([[False, True, False, True, True]])
        partner = torch.tensor([[0, 2, 0, 2, 2]])
        out, new_sizes = merge_tokens(x, sizes, src, partner)
        idx = [1, 2, 3, 4]
        ref = (sizes[0, idx, None] * x[0, idx]).sum(0) / sizes[0, idx].sum()
        np.testing.assert_allclose(out[0, 2].numpy(), ref.numpy(), rtol=1e-14)
        assert float(new_sizes[0, 2]) == 7.0

    def test_pairwise_applies_in_source_order(self):
        x = t([[[0.0], [4.0], [0.0], [8.0]]])
        sizes = torch.ones(1, 4, dtype=torch.float64)
        src = torch.tensor([[False, True, False, True]])
        out, _ = merge_tokens(x, sizes, src, torch.tensor([[0, 2, 0, 2]]), "pairwise")
        # ((0 + 4) / 2 + 8) / 2
        assert float(out[0, 2, 0]) == 5.0

    def test_no_sources_is_identity(self):
        x = t([[[1.0], [2.0]]])
        out, s = merge_tokens(x, torch.ones(1, 2, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.bool),
                              torch.zeros(1, 2, dtype=torch.long))
        assert out is x

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            merge_tokens(t([[[1.0], [2.0]]]), torch.ones(1, 2, dtype=torch.float64),
                         torch.tensor([[False, True]]), torch.tensor([[0, 0]]), "max")


class TestTrace:
    def _decisions(self):
        # layer 0: token 1 merges into 2, token 4 pruned; layer 1 (gathered ids 0,2,3): 3 pruned
        return [
            {"ids": torch.arange(5), "merge_src": torch.tensor([[False, True, False, False, False]]),
             "merge_dst": torch.tensor([[0, 2, 0, 0, 0]]), "prune": torch.tensor([[False, False, False, False, True]])},
            {"ids": torch.tensor([0, 2, 3]), "merge_src": torch.zeros(1, 3, dtype=torch.bool),
             "merge_dst": torch.zeros(1, 3, dtype=torch.long), "prune": torch.tensor([[False, False, True]])},
        ]

    def test_owner_map(self):
        trace = build_trace(self._decisions(), 5)
        r0, r1 = trace.record(0, 0), trace.record(0, 1)
        assert r0["assignments"] == [[1, 2]] and r0["pruned_ids"] == [4]
        assert r0["owner"] == [0, 2, 2, 3, -1]
        assert r1["owner"] == [0, 2, 2, -1, -1]
        assert (r0["merged"], r0["pruned"], r1["pruned"]) == (1, 1, 1)
        assert r1["kept"] == 2

    def test_jsonl_round_trip(self):
        trace = build_trace(self._decisions(), 5)
        again = ReductionTrace.from_jsonl(trace.to_jsonl())
        assert again.records == trace.records
        assert all(json.loads(line) for line in trace.to_jsonl().splitlines())
        merged, pruned = again.counts()
        assert merged.tolist() == [[1, 0]] and pruned.tolist() == [[1, 1]]

    def test_extend_offsets_samples(self):
        a = build_trace(self._decisions(), 5)
        a.extend(build_trace(self._decisions(), 5), sample_offset=1)
        assert a.samples() == 2 and a.layers() == 2
        with pytest.raises(KeyError):
            a.record(5, 0)
