"""Attention scoring against a straight-line reimplementation, top-p
selection against a sort-and-accumulate oracle, and the sparse block against
its dense twin."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsemodal.attention import (
    AttentionParams,
    apply_mask,
    attention_scores,
    crossmodal_block,
    nucleus_select,
    write_mask_pgm,
    write_selection_csv,
)
from sparsemodal.sparse import FlopsLedger, densify, to_sparse
from sparsemodal.tensor import (
    ParamStore,
    ShapeMismatch,
    conv2d,
    grad_check,
    maxpool2,
    relu,
    tensor,
)


def make_params(store, channels=8, query_dim=16, width=8, prefix="attn"):
    return AttentionParams.create(store, prefix, channels, query_dim, width)


def straight_line_scores(m, q, params):
    """Independent per-position evaluation of the two attention equations."""
    wm, bm = params.map_weight.data, params.map_bias.data
    wq = params.query_weight.data
    wi, bi = params.score_weight.data, float(params.score_bias.data[0])
    c, s, h, w = m.shape
    out = np.zeros((s, h, w))
    for si in range(s):
        logits = np.zeros((h, w))
        for hi in range(h):
            for wi_ in range(w):
                hidden = np.tanh(wm @ m[:, si, hi, wi_] + bm + wq @ q)
                logits[hi, wi_] = wi @ hidden + bi
        e = np.exp(logits - logits.max())
        out[si] = e / e.sum()
    return out


def nucleus_oracle(scores, p, active=None):
    """Sort-and-accumulate selection, one position at a time."""
    s, h, w = scores.shape
    mask = np.zeros((s, h, w), dtype=bool)
    for si in range(s):
        cells = [(si, hi, wi) for hi in range(h) for wi in range(w)
                 if active is None or active[si, hi, wi]]
        cells.sort(key=lambda cell: (-scores[cell], cell))
        total = 0.0
        for cell in cells:
            mask[cell] = True
            total += scores[cell]
            if total >= p:
                break
    return mask


class TestAttentionScores:
    def test_shape_and_normalization(self):
        rng = np.random.default_rng(0)
        store = ParamStore(seed=0)
        params = make_params(store)
        m = tensor(rng.normal(size=(8, 2, 4, 4)))
        q = tensor(rng.normal(size=16))
        scores = attention_scores(m, q, params)
        assert scores.shape == (2, 4, 4)
        np.testing.assert_allclose(scores.data.sum(axis=(1, 2)), 1.0,
                                   atol=1e-9)
        assert np.all(scores.data > 0) and np.all(scores.data < 1)

    def test_zero_score_weight_gives_uniform(self):
        rng = np.random.default_rng(1)
        store = ParamStore(seed=1)
        params = make_params(store)
        params.score_weight.data = np.zeros(8)
        scores = attention_scores(tensor(rng.normal(size=(8, 2, 4, 4))),
                                  tensor(rng.normal(size=16)), params)
        np.testing.assert_allclose(scores.data, 1.0 / 16.0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_straight_line_oracle(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamStore(seed=seed)
        params = make_params(store, channels=5, query_dim=7, width=6)
        m = rng.normal(size=(5, 3, 4, 3))
        q = rng.normal(size=7)
        got = attention_scores(tensor(m), tensor(q), params)
        np.testing.assert_allclose(got.data,
                                   straight_line_scores(m, q, params),
                                   atol=1e-12)

    def test_per_slice_queries(self):
        rng = np.random.default_rng(2)
        store = ParamStore(seed=2)
        params = make_params(store, channels=3, query_dim=4, width=5)
        m = rng.normal(size=(3, 2, 3, 3))
        qs = rng.normal(size=(2, 4))
        got = attention_scores(tensor(m), tensor(qs), params).data
        for s in range(2):
            ref = straight_line_scores(m[:, s:s + 1], qs[s], params)
            np.testing.assert_allclose(got[s], ref[0], atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        store = ParamStore(seed=3)
        params = make_params(store)
        with pytest.raises(ShapeMismatch):
            attention_scores(tensor(np.zeros((4, 1, 2, 2))),
                             tensor(np.zeros(16)), params)
        with pytest.raises(ShapeMismatch):
            attention_scores(tensor(np.zeros((8, 1, 2, 2))),
                             tensor(np.zeros(9)), params)

    def test_differentiable_in_all_inputs(self):
        store = ParamStore(seed=4)
        make_params(store, channels=3, query_dim=4, width=4)
        store.add("m", (3, 1, 3, 3), init="fan_in", fan_in=3)
        store.add("q", (4,), init="fan_in", fan_in=4)
        params = AttentionParams(store["attn/map_weight"],
                                 store["attn/map_bias"],
                                 store["attn/query_weight"],
                                 store["attn/score_weight"],
                                 store["attn/score_bias"])
        weights = np.random.default_rng(4).normal(size=(1, 3, 3))

        def f():
            scores = attention_scores(store["m"], store["q"], params)
            return (scores * weights).sum()

        report = grad_check(f, store, eps=1e-5, tol=1e-4)
        assert report.ok, report.failures[:3]

    def test_logit_shift_leaves_masks_unchanged(self):
        rng = np.random.default_rng(5)
        store = ParamStore(seed=5)
        params = make_params(store)
        m = tensor(rng.normal(size=(8, 2, 4, 4)))
        q = tensor(rng.normal(size=16))
        base = attention_scores(m, q, params)
        params.score_bias.data = params.score_bias.data + 11.0
        shifted = attention_scores(m, q, params)
        np.testing.assert_allclose(base.data, shifted.data, rtol=1e-12)
        for p in (0.3, 0.7, 1.0):
            np.testing.assert_array_equal(nucleus_select(base.data, p),
                                          nucleus_select(shifted.data, p))


class TestNucleusSelect:
    def test_three_scores_example(self):
        scores = np.array([[[0.5, 0.3, 0.2]]])
        mask = nucleus_select(scores, 0.7)
        np.testing.assert_array_equal(mask, [[[True, True, False]]])

    def test_full_mass_selects_all(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(2, 4, 4))
        e = np.exp(logits)
        scores = e / e.sum(axis=(1, 2), keepdims=True)
        assert nucleus_select(scores, 1.0).all()

    def test_uniform_half_takes_first_eight_row_major(self):
        scores = np.full((1, 4, 4), 1.0 / 16.0)
        mask = nucleus_select(scores, 0.5)
        assert mask.sum() == 8
        np.testing.assert_array_equal(mask[0].reshape(-1)[:8], True)
        np.testing.assert_array_equal(mask[0].reshape(-1)[8:], False)

    def test_p_out_of_range_rejected(self):
        scores = np.full((1, 2, 2), 0.25)
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                nucleus_select(scores, bad)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_oracle_on_random_maps(self, seed):
        rng = np.random.default_rng(seed)
        s, h, w = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
        logits = rng.normal(size=(s, h, w)) * rng.uniform(0.1, 4.0)
        e = np.exp(logits)
        scores = e / e.sum(axis=(1, 2), keepdims=True)
        p = rng.uniform(0.05, 1.0)
        np.testing.assert_array_equal(nucleus_select(scores, p),
                                      nucleus_oracle(scores, p))

    def test_minimality(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            logits = rng.normal(size=(1, 5, 5)) * 2
            e = np.exp(logits)
            scores = e / e.sum()
            p = rng.uniform(0.1, 0.99)
            mask = nucleus_select(scores, p)
            kept = scores[mask]
            assert kept.sum() >= p or mask.sum() == scores.size
            if mask.sum() > 1:
                assert kept.sum() - kept.min() < p

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.01, 10.0), min_size=4, max_size=16),
           st.floats(0.01, 1.0), st.floats(0.01, 1.0))
    def test_monotone_nesting(self, raw, p1, p2):
        raw = np.asarray(raw)
        scores = (raw / raw.sum()).reshape(1, 1, -1)
        lo, hi = min(p1, p2), max(p1, p2)
        inner = nucleus_select(scores, lo)
        outer = nucleus_select(scores, hi)
        assert not np.any(inner & ~outer)

    def test_active_restriction_bars_reselection(self):
        rng = np.random.default_rng(8)
        active = rng.random((2, 4, 4)) < 0.5
        active[:, 0, 0] = True
        logits = rng.normal(size=(2, 4, 4))
        e = np.where(active, np.exp(logits), 0.0)
        scores = e / e.sum(axis=(1, 2), keepdims=True)
        mask = nucleus_select(scores, 1.0, active=active)
        np.testing.assert_array_equal(mask, active)
        assert not np.any(nucleus_select(scores, 0.4, active=active) & ~active)

    def test_at_least_one_per_slice(self):
        scores = np.zeros((1, 3, 3))
        scores[0, 2, 2] = 1.0
        mask = nucleus_select(scores, 0.01)
        assert mask.sum() == 1 and mask[0, 2, 2]


class TestApplyMask:
    def test_all_ones_is_dense_equivalent(self):
        rng = np.random.default_rng(9)
        m = tensor(rng.normal(size=(3, 2, 4, 4)))
        sp = apply_mask(np.ones((2, 4, 4)), m)
        np.testing.assert_array_equal(densify(sp).data, m.data)

    def test_masked_position_zero_across_channels(self):
        rng = np.random.default_rng(10)
        m = tensor(rng.normal(size=(4, 1, 3, 3)))
        mask = np.ones((1, 3, 3))
        mask[0, 1, 1] = 0
        sp = apply_mask(mask, m)
        assert np.all(densify(sp).data[:, 0, 1, 1] == 0.0)

    def test_active_count_is_popcount(self):
        rng = np.random.default_rng(11)
        mask = rng.random((2, 5, 5)) < 0.3
        mask[0, 0, 0] = True
        sp = apply_mask(mask, tensor(rng.normal(size=(2, 2, 5, 5))))
        assert sp.active_count == int(mask.sum())

    def test_gradient_only_at_selected(self):
        rng = np.random.default_rng(12)
        m = tensor(rng.normal(size=(2, 1, 4, 4)), requires_grad=True)
        mask = rng.random((1, 4, 4)) < 0.5
        mask[0, 0, 0] = True
        sp = apply_mask(mask, m)
        (sp.features * sp.features).sum().backward()
        assert np.all(m.grad[:, ~mask] == 0.0)
        assert np.any(m.grad[:, mask] != 0.0)

    def test_sparse_input_subset(self):
        rng = np.random.default_rng(13)
        full = rng.random((1, 4, 4)) < 0.7
        full[0, 0, 0] = True
        sp = to_sparse(tensor(rng.normal(size=(2, 1, 4, 4))), full)
        sub = full.copy()
        sub[0, full[0].argmax(), :] = False
        sub[0, 0, 0] = full[0, 0, 0]
        if not sub.any():
            sub[0, 0, 0] = True
        out = apply_mask(sub & full, sp)
        assert out.active_count == int((sub & full).sum())

    def test_mask_outside_active_set_rejected(self):
        rng = np.random.default_rng(14)
        base = np.zeros((1, 3, 3), dtype=bool)
        base[0, 0, 0] = True
        sp = to_sparse(tensor(rng.normal(size=(1, 1, 3, 3))), base)
        bad = base.copy()
        bad[0, 1, 1] = True
        with pytest.raises(ShapeMismatch):
            apply_mask(bad, sp)

    def test_soft_gate_multiplies_by_score(self):
        rng = np.random.default_rng(15)
        m = tensor(rng.normal(size=(2, 1, 3, 3)))
        scores = tensor(rng.dirichlet(np.ones(9)).reshape(1, 3, 3))
        mask = np.ones((1, 3, 3))
        gated = apply_mask(mask, m, gate=scores)
        plain = apply_mask(mask, m)
        expect = plain.features.data * scores.data.reshape(-1, 1)
        np.testing.assert_allclose(gated.features.data, expect)

    def test_soft_gate_routes_gradient_to_attention(self):
        store = ParamStore(seed=16)
        params = make_params(store, channels=2, query_dim=3, width=4)
        rng = np.random.default_rng(16)
        m = tensor(rng.normal(size=(2, 1, 4, 4)))
        q = tensor(rng.normal(size=3))
        scores = attention_scores(m, q, params)
        mask = nucleus_select(scores.data, 0.6)
        sp = apply_mask(mask, m, gate=scores)
        (sp.features * sp.features).sum().backward()
        assert params.map_weight.grad is not None
        assert np.any(params.map_weight.grad != 0.0)

    def test_faithful_mode_gives_attention_no_gradient(self):
        store = ParamStore(seed=17)
        params = make_params(store, channels=2, query_dim=3, width=4)
        rng = np.random.default_rng(17)
        m = tensor(rng.normal(size=(2, 1, 4, 4)))
        q = tensor(rng.normal(size=3))
        scores = attention_scores(m, q, params)
        mask = nucleus_select(scores.data, 0.6)
        sp = apply_mask(mask, m)  # binary mask, scores unused downstream
        (sp.features * sp.features).sum().backward()
        assert params.map_weight.grad is None


class TestCrossmodalBlock:
    def _setup(self, seed, c_in=3, c_out=4, s=2, hw=8):
        rng = np.random.default_rng(seed)
        store = ParamStore(seed=seed)
        params = make_params(store, channels=c_in, query_dim=5, width=4)
        k1 = tensor(rng.normal(size=(c_out, c_in, 3, 3)) * 0.3)
        b1 = tensor(rng.normal(size=c_out) * 0.1)
        k2 = tensor(rng.normal(size=(c_out, c_out, 3, 3)) * 0.3)
        b2 = tensor(rng.normal(size=c_out) * 0.1)
        m = tensor(rng.normal(size=(c_in, s, hw, hw)))
        q = tensor(rng.normal(size=5))
        return store, params, (k1, b1), (k2, b2), m, q

    def test_full_selection_equals_dense_twin(self):
        _, params, c1, c2, m, q = self._setup(18)
        out, _, mask = crossmodal_block(m, q, params, c1, c2, p=1.0)
        assert mask.all()
        x = m.transpose(1, 0, 2, 3)
        x = relu(conv2d(x, c1[0], c1[1], pad=1))
        x = relu(conv2d(x, c2[0], c2[1], pad=1))
        ref = maxpool2(x)
        got = densify(out).data.transpose(1, 0, 2, 3)
        np.testing.assert_allclose(got, ref.data, atol=1e-9)

    def test_pooling_halves_extent(self):
        _, params, c1, c2, m, q = self._setup(19)
        out, _, _ = crossmodal_block(m, q, params, c1, c2, p=0.7)
        assert out.extents[2:] == (4, 4)

    def test_half_mass_macs_bounded(self):
        _, params, c1, c2, m, q = self._setup(20)
        ledger = FlopsLedger()
        out, _, mask = crossmodal_block(m, q, params, c1, c2, p=0.5,
                                        ledger=ledger, layer="b")
        selected = int(mask.sum())
        total = mask.size
        for rec in ledger.records().values():
            # each selected site reads at most z^2 active neighbors, so
            # executed <= selected * z^2 * m * n = selected * (dense / S*H*W)
            per_location = rec.dense // total
            assert rec.executed <= selected * per_location

    def test_sparse_input_keeps_nesting(self):
        _, params, c1, c2, m, q = self._setup(21)
        out1, _, mask1 = crossmodal_block(m, q, params, c1, c2, p=0.6)
        store2 = ParamStore(seed=99)
        params2 = make_params(store2, channels=4, query_dim=5, width=4)
        rng = np.random.default_rng(99)
        k1 = tensor(rng.normal(size=(4, 4, 3, 3)) * 0.3)
        b1 = tensor(np.zeros(4))
        out2, _, mask2 = crossmodal_block(out1, q, params2, (k1, b1),
                                          (k1, b1), p=0.6)
        assert not np.any(mask2 & ~out1.active_mask())
        assert out2.active_count <= out1.active_count


class TestMaskExport:
    def test_pgm_format(self, tmp_path):
        mask = np.array([[True, False], [False, True]])
        path = tmp_path / "m.pgm"
        write_mask_pgm(mask, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "P2"
        assert lines[1] == "2 2"
        assert lines[2] == "255"
        assert lines[3].split() == ["255", "0"]

    def test_selection_csv(self, tmp_path):
        path = tmp_path / "sel.csv"
        write_selection_csv([("block1", 0, 1, 2)], path)
        assert path.read_text().splitlines() == ["layer,s,h,w", "block1,0,1,2"]
