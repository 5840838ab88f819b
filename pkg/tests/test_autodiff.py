"""Tensor-core tests: each op against an independent formula oracle, plus
finite-difference agreement for every backward rule."""

import numpy as np
import pytest

from newsrec import autodiff as ad
from newsrec import layers
from newsrec.autodiff import AllMasked, NotScalarLoss, ShapeMismatch, Tensor
from newsrec.layers import ParamGraph


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestDense:
    def test_identity(self):
        x = Tensor([[1.0, 2.0]])
        w = Tensor(np.eye(2))
        b = Tensor(np.zeros(2))
        out = layers.dense(x, w, b)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_bias_only(self):
        x = Tensor(np.zeros((3, 4)))
        w = Tensor(np.zeros((4, 2)))
        b = Tensor([5.0, -1.0])
        out = layers.dense(x, w, b)
        np.testing.assert_array_equal(out.data, np.tile([5.0, -1.0], (3, 1)))

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ad.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            layers.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestSoftmax:
    def test_uniform(self):
        out = ad.masked_softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_analytic(self):
        out = ad.masked_softmax(Tensor(np.log([1.0, 2.0, 3.0])))
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_large_logits_stable(self):
        out = ad.masked_softmax(Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_masked_entries_exactly_zero(self):
        out = ad.masked_softmax(Tensor([1.0, 2.0, 3.0]), mask=[True, False, True])
        assert out.data[1] == 0.0
        assert abs(out.data.sum() - 1.0) < 1e-12

    def test_all_masked_raises(self):
        with pytest.raises(AllMasked):
            ad.masked_softmax(Tensor([1.0, 2.0]), mask=[False, False])

    def test_all_masked_allowed_gives_zeros(self):
        out = ad.masked_softmax(Tensor([1.0, 2.0]), mask=[False, False], allow_empty=True)
        np.testing.assert_array_equal(out.data, [0.0, 0.0])


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        loss = ad.tsum(ad.mul(x, x))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_unused_parameter_gets_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.tsum(x))
        assert unused.grad is None

    def test_frozen_input_untouched(self):
        x = Tensor(np.ones(3), requires_grad=True)
        frozen = Tensor(np.ones(3), requires_grad=False)
        loss = ad.tsum(ad.mul(x, frozen))
        ad.backward(loss)
        assert frozen.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(NotScalarLoss):
            ad.backward(Tensor(np.ones(2), requires_grad=True))

    def test_reused_node_accumulates(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        loss = ad.mul(x, x)
        ad.backward(loss)
        assert abs(float(x.grad) - 6.0) < 1e-12

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert y.requires_grad is False


def _check_op(builder, shapes, seed=0, tol=1e-6):
    """Finite-difference oracle for one op's backward rule."""
    rng = np.random.default_rng(seed)
    graph = ParamGraph()
    params = [graph.add(f"p{i}", rng.normal(size=s) * 0.5) for i, s in enumerate(shapes)]
    err = layers.finite_diff_check(graph, lambda: builder(*params), rng=rng)
    assert err < tol, f"max rel err {err}"


class TestGradientsAgainstFiniteDifferences:
    def test_elementwise_chain(self):
        _check_op(lambda a, b: ad.tsum(ad.mul(ad.tanh(a), ad.sigmoid(b))),
                  [(3, 4), (3, 4)])

    def test_div_sqrt_log_exp(self):
        rng = np.random.default_rng(1)
        graph = ParamGraph()
        a = graph.add("a", rng.uniform(0.5, 2.0, size=(4,)))
        b = graph.add("b", rng.uniform(0.5, 2.0, size=(4,)))
        fn = lambda: ad.tsum(ad.div(ad.log(ad.exp(a)), ad.sqrt(b)))
        assert layers.finite_diff_check(graph, fn, rng=rng) < 1e-6

    def test_matmul_broadcast(self):
        _check_op(lambda a, b: ad.tsum(ad.matmul(a, b)), [(2, 3, 4), (4, 5)])

    def test_dense_layer(self):
        _check_op(lambda x, w, b: ad.tsum(ad.tanh(layers.dense(x, w, b))),
                  [(3, 4), (4, 2), (2,)])

    def test_softmax_masked(self):
        mask = np.array([[True, True, False, True], [True, False, True, True]])
        _check_op(lambda x: ad.tsum(ad.mul(ad.masked_softmax(x, mask), x)), [(2, 4)])

    def test_layer_norm(self):
        _check_op(lambda x, g, b: ad.tsum(ad.mul(ad.layer_norm(x, g, b), x)),
                  [(3, 5), (5,), (5,)])

    def test_conv1d(self):
        _check_op(lambda x, f, b: ad.tsum(ad.relu(ad.conv1d_same(x, f, b))),
                  [(2, 6, 3), (3, 3, 4), (4,)])

    def test_rows_gather(self):
        ids = np.array([[0, 2], [2, 1]])
        _check_op(lambda t: ad.tsum(ad.mul(ad.rows(t, ids), ad.rows(t, ids))), [(4, 3)])

    def test_concat_select_reshape(self):
        def fn(a, b):
            c = ad.concat([a, b], axis=1)
            return ad.tsum(ad.mul(ad.select(c, 1, 0), ad.select(c, 1, 3)))
        _check_op(fn, [(2, 2, 3), (2, 2, 3)])

    def test_gelu(self):
        _check_op(lambda x: ad.tsum(ad.gelu(x)), [(3, 4)])

    def test_gru_chain_of_five(self):
        rng = np.random.default_rng(7)
        graph = ParamGraph()
        layers.add_gru_params(graph, "g.", 3, 4, rng)
        xs = [Tensor(rng.normal(size=(2, 3))) for _ in range(5)]

        def fn():
            h = Tensor(np.zeros((2, 4)))
            for x in xs:
                h = layers.gru_step(x, h, graph, "g.")
            return ad.tsum(ad.mul(h, h))

        assert layers.finite_diff_check(graph, fn, rng=rng) < 1e-5


class TestAdditiveAttention:
    def test_single_position_weight_one(self):
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(1, 1, 4)))
        w = Tensor(rng.normal(size=(4, 3)))
        v = Tensor(rng.normal(size=(3,)))
        weights, pooled = layers.additive_attention(h, w, v)
        np.testing.assert_allclose(weights.data, [[1.0]])
        np.testing.assert_allclose(pooled.data, h.data[:, 0, :])

    def test_identical_rows_symmetric(self):
        rng = np.random.default_rng(1)
        row = rng.normal(size=4)
        h = Tensor(np.stack([row, row])[None])
        w = Tensor(rng.normal(size=(4, 3)))
        v = Tensor(rng.normal(size=(3,)))
        weights, _ = layers.additive_attention(h, w, v)
        np.testing.assert_allclose(weights.data, [[0.5, 0.5]], atol=1e-12)

    def test_matches_direct_formula_oracle(self):
        rng = np.random.default_rng(2)
        h = rng.normal(size=(2, 5, 4))
        w = rng.normal(size=(4, 3))
        v = rng.normal(size=3)
        weights, pooled = layers.additive_attention(Tensor(h), Tensor(w), Tensor(v))
        # independent oracle: direct formula
        scores = np.tanh(h @ w) @ v
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        wref = e / e.sum(axis=-1, keepdims=True)
        pref = (wref[..., None] * h).sum(axis=1)
        np.testing.assert_allclose(weights.data, wref, atol=1e-12)
        np.testing.assert_allclose(pooled.data, pref, atol=1e-12)

    def test_weights_sum_to_one_under_mask(self):
        rng = np.random.default_rng(3)
        h = Tensor(rng.normal(size=(3, 6, 4)))
        w = Tensor(rng.normal(size=(4, 3)))
        v = Tensor(rng.normal(size=(3,)))
        mask = rng.random((3, 6)) > 0.4
        mask[:, 0] = True
        weights, _ = layers.additive_attention(h, w, v, mask=mask)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)
        assert (weights.data[~mask] == 0.0).all()


def _mhsa_oracle(h, wq, bq, wk, bk, wv, bv, wo, bo, heads, mask=None):
    """Direct per-head formula, written independently of the layer."""
    B, n, d = h.shape
    dh = d // heads
    out = np.zeros((B, n, d))
    for bi in range(B):
        ctx_heads = []
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            q = h[bi] @ wq[:, sl] + bq[sl]
            k = h[bi] @ wk[:, sl] + bk[sl]
            v = h[bi] @ wv[:, sl] + bv[sl]
            scores = q @ k.T / np.sqrt(dh)
            if mask is not None:
                scores[:, ~mask[bi]] = -np.inf
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            a = e / e.sum(axis=-1, keepdims=True)
            ctx_heads.append(a @ v)
        out[bi] = np.concatenate(ctx_heads, axis=-1) @ wo + bo
    return out


class TestMultiHeadSelfAttention:
    def _params(self, d, rng):
        mk = lambda: rng.normal(size=(d, d)) * 0.3
        z = np.zeros(d)
        return [Tensor(x) for x in (mk(), z, mk(), z, mk(), z, mk(), z)]

    def test_identity_single_row(self):
        d = 4
        eye, z = Tensor(np.eye(d)), Tensor(np.zeros(d))
        h = Tensor(np.random.default_rng(0).normal(size=(1, 3, d)))
        mask = np.array([[False, True, False]])
        out = layers.multi_head_self_attention(
            h, eye, z, eye, z, eye, z, eye, z, heads=1, mask=mask)
        np.testing.assert_allclose(out.data[0, 1], h.data[0, 1], atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        d, heads = 8, 2
        params = self._params(d, rng)
        h = rng.normal(size=(1, 5, d))
        out1 = layers.multi_head_self_attention(Tensor(h), *params, heads=heads)
        perm = np.array([1, 0, 2, 3, 4])
        out2 = layers.multi_head_self_attention(Tensor(h[:, perm]), *params, heads=heads)
        np.testing.assert_allclose(out2.data, out1.data[:, perm], atol=1e-12)

    def test_matches_per_head_oracle(self):
        rng = np.random.default_rng(5)
        d, heads = 8, 2
        wq, wk, wv, wo = (rng.normal(size=(d, d)) * 0.3 for _ in range(4))
        bq, bk, bv, bo = (rng.normal(size=d) * 0.1 for _ in range(4))
        h = rng.normal(size=(2, 5, d))
        mask = np.array([[True, True, False, True, True]] * 2)
        out = layers.multi_head_self_attention(
            Tensor(h), Tensor(wq), Tensor(bq), Tensor(wk), Tensor(bk),
            Tensor(wv), Tensor(bv), Tensor(wo), Tensor(bo), heads=heads, mask=mask)
        ref = _mhsa_oracle(h, wq, bq, wk, bk, wv, bv, wo, bo, heads, mask=mask)
        np.testing.assert_allclose(out.data, ref, atol=1e-10)

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(6)
        params = self._params(6, rng)
        with pytest.raises(ShapeMismatch):
            layers.multi_head_self_attention(
                Tensor(rng.normal(size=(1, 3, 6))), *params, heads=4)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        d, heads = 8, 2
        graph = ParamGraph()
        names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
        tensors = []
        for nme in names:
            shape = (d, d) if nme.startswith("w") else (d,)
            tensors.append(graph.add(nme, rng.normal(size=shape) * 0.3))
        h = Tensor(rng.normal(size=(2, 4, d)))
        mask = np.array([[True, True, True, False]] * 2)
        fn = lambda: ad.tsum(ad.tanh(layers.multi_head_self_attention(
            h, *tensors, heads=heads, mask=mask)))
        assert layers.finite_diff_check(graph, fn, rng=rng) < 1e-5


class TestGru:
    def _graph(self, d_in, d_h, rng, zero=False):
        graph = ParamGraph()
        layers.add_gru_params(graph, "g.", d_in, d_h, rng)
        if zero:
            for name in graph.names():
                graph[name].data[...] = 0.0
        return graph

    def test_all_zero_gives_zero_state(self):
        graph = self._graph(3, 4, np.random.default_rng(0), zero=True)
        h = layers.gru_step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4))), graph, "g.")
        np.testing.assert_array_equal(h.data, np.zeros((1, 4)))

    def test_saturated_update_gate_keeps_state(self):
        rng = np.random.default_rng(1)
        graph = self._graph(3, 4, rng)
        graph["g.b_z"].data[...] = 50.0  # update gate ~= 1 -> keep previous state
        h0 = rng.normal(size=(1, 4))
        h = layers.gru_step(Tensor(rng.normal(size=(1, 3))), Tensor(h0), graph, "g.")
        np.testing.assert_allclose(h.data, h0, atol=1e-6)

    def test_matches_direct_formula_oracle(self):
        rng = np.random.default_rng(2)
        graph = self._graph(3, 4, rng)
        x = rng.normal(size=(2, 3))
        h0 = rng.normal(size=(2, 4))
        out = layers.gru_step(Tensor(x), Tensor(h0), graph, "g.")
        sig = lambda z: 1.0 / (1.0 + np.exp(-z))
        g = lambda s: graph["g." + s].data
        r = sig(x @ g("w_r") + h0 @ g("u_r") + g("b_r"))
        z = sig(x @ g("w_z") + h0 @ g("u_z") + g("b_z"))
        n = np.tanh(x @ g("w_n") + (r * h0) @ g("u_n") + g("b_n"))
        np.testing.assert_allclose(out.data, (1 - z) * n + z * h0, atol=1e-12)


class TestConv:
    def test_width_one_average_filter(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 4, 3))
        f = np.full((1, 3, 1), 1.0 / 3.0)
        out = ad.conv1d_same(Tensor(x), Tensor(f), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data[0, :, 0], x[0].mean(axis=1), atol=1e-12)

    def test_zero_input_gives_bias(self):
        out = ad.conv1d_same(Tensor(np.zeros((1, 5, 3))),
                             Tensor(np.zeros((3, 3, 2))), Tensor([1.5, -2.0]))
        np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (1, 5, 1)))

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 6, 3))
        f = rng.normal(size=(3, 3, 4))
        b = rng.normal(size=4)
        out = ad.conv1d_same(Tensor(x), Tensor(f), Tensor(b))
        # independent oracle: explicit loops over padded windows
        xp = np.pad(x, [(0, 0), (1, 1), (0, 0)])
        ref = np.zeros((2, 6, 4))
        for bi in range(2):
            for i in range(6):
                for j in range(3):
                    ref[bi, i] += xp[bi, i + j] @ f[j]
                ref[bi, i] += b
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_even_width_rejected(self):
        with pytest.raises(ShapeMismatch):
            ad.conv1d_same(Tensor(np.zeros((1, 4, 3))),
                           Tensor(np.zeros((2, 3, 1))), Tensor(np.zeros(1)))


class TestTransformerBlock:
    def test_zero_weights_reduce_to_double_layer_norm(self):
        rng = np.random.default_rng(0)
        graph = ParamGraph()
        cfg = layers.TransformerConfig(vocab_size=10, num_layers=1, hidden_size=8,
                                       num_heads=2, ff_size=16, max_positions=8)
        layers.add_transformer_params(graph, "t.", cfg, rng)
        for name in graph.names():
            if "block0" in name and "norm" not in name:
                graph[name].data[...] = 0.0
        h = rng.normal(size=(1, 4, 8))
        out = layers.transformer_block(Tensor(h), graph, "t.block0.", cfg.num_heads)

        def ln(a):
            mu = a.mean(axis=-1, keepdims=True)
            var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
            return (a - mu) / np.sqrt(var + 1e-12)

        np.testing.assert_allclose(out.data, ln(ln(h)), atol=1e-12)

    def test_layer_norm_statistics(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 7), loc=2.0, scale=3.0)
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7)))
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-9
        assert np.abs(out.data.var(axis=-1) - 1.0).max() < 1e-6

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(2)
        cfg = layers.TransformerConfig(vocab_size=10, num_layers=1, hidden_size=8,
                                       num_heads=2, ff_size=16, max_positions=8)
        graph = ParamGraph()
        layers.add_transformer_params(graph, "t.", cfg, rng)
        h = rng.normal(size=(2, 4, 8))
        out = layers.transformer_block(Tensor(h), graph, "t.block0.", cfg.num_heads)

        # oracle composed from independently validated pieces, plain numpy
        def ln(a, gain, bias):
            mu = a.mean(axis=-1, keepdims=True)
            var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
            return (a - mu) / np.sqrt(var + 1e-12) * gain + bias

        from scipy.special import erf
        g = lambda s: graph["t.block0." + s].data
        attn = _mhsa_oracle(h, g("attn.query.weight"), g("attn.query.bias"),
                            g("attn.key.weight"), g("attn.key.bias"),
                            g("attn.value.weight"), g("attn.value.bias"),
                            g("attn.output.weight"), g("attn.output.bias"), 2)
        h1 = ln(h + attn, g("attn.norm.gain"), g("attn.norm.bias"))
        inner = h1 @ g("ffn.inner.weight") + g("ffn.inner.bias")
        act = inner * 0.5 * (1.0 + erf(inner / np.sqrt(2.0)))
        ff = act @ g("ffn.output.weight") + g("ffn.output.bias")
        ref = ln(h1 + ff, g("ffn.norm.gain"), g("ffn.norm.bias"))
        np.testing.assert_allclose(out.data, ref, atol=1e-9)

    def test_full_block_gradients(self):
        rng = np.random.default_rng(3)
        cfg = layers.TransformerConfig(vocab_size=12, num_layers=2, hidden_size=8,
                                       num_heads=2, ff_size=16, max_positions=8)
        graph = ParamGraph()
        layers.add_transformer_params(graph, "t.", cfg, rng)
        ids = np.array([[1, 3, 5, 0], [2, 2, 7, 4]])
        mask = np.array([[True, True, True, False], [True, True, True, True]])
        fn = lambda: ad.tsum(ad.tanh(
            layers.transformer_encode(ids, mask, graph, "t.", cfg)))
        assert layers.finite_diff_check(graph, fn, rng=rng, coords_per_param=2) < 1e-4


class TestFreezeDepth:
    def _setup(self):
        rng = np.random.default_rng(0)
        cfg = layers.TransformerConfig(vocab_size=10, num_layers=4, hidden_size=8,
                                       num_heads=2, ff_size=16, max_positions=8)
        graph = ParamGraph()
        layers.add_transformer_params(graph, "t.", cfg, rng)
        return graph, cfg

    def test_depth_zero_freezes_everything(self):
        graph, cfg = self._setup()
        layers.set_transformer_finetune_depth(graph, "t.", cfg, 0)
        assert not any(i.trainable for _, i in graph.items())

    def test_top_blocks_trainable(self):
        graph, cfg = self._setup()
        layers.set_transformer_finetune_depth(graph, "t.", cfg, 2)
        for name, info in graph.items():
            if "block2" in name or "block3" in name:
                assert info.trainable, name
            else:
                assert not info.trainable, name

    def test_bad_depth_rejected(self):
        graph, cfg = self._setup()
        with pytest.raises(layers.BadFreezeDepth):
            layers.set_transformer_finetune_depth(graph, "t.", cfg, 5)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        graph = ParamGraph()
        p = graph.add("p", np.array([1.0, 2.0]))
        opt = layers.Adam(graph, lr=0.1)
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_closed_form(self):
        graph = ParamGraph()
        p = graph.add("p", np.array([0.0]))
        opt = layers.Adam(graph, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8)
        p.grad = np.array([1.0])
        opt.step()
        expected = -0.001 * (1.0 / (1.0 + 1e-8))
        np.testing.assert_allclose(p.data, [expected], rtol=1e-12)

    def test_descends_quadratic_bowl(self):
        graph = ParamGraph()
        p = graph.add("p", np.array([3.0, -2.0]))
        opt = layers.Adam(graph, lr=0.05)
        losses = []
        for _ in range(100):
            graph.zero_grad()
            loss = ad.tsum(ad.mul(p, p))
            ad.backward(loss)
            losses.append(loss.item())
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_frozen_parameter_bitwise_unchanged(self):
        rng = np.random.default_rng(0)
        graph = ParamGraph()
        w = graph.add("w", rng.normal(size=(3, 3)))
        frozen = graph.add("frozen", rng.normal(size=(3, 3)), trainable=False)
        before = frozen.data.tobytes()
        opt = layers.Adam(graph, lr=0.1)
        x = Tensor(rng.normal(size=(2, 3)))
        for _ in range(5):
            graph.zero_grad()
            ad.backward(ad.tsum(ad.matmul(ad.matmul(x, frozen), w)))
            opt.step()
        assert frozen.data.tobytes() == before

    def test_pinned_row_stays_zero(self):
        graph = ParamGraph()
        table = graph.add("t", np.zeros((3, 2)), pinned_rows=(0,))
        table.data[1:] = 1.0
        opt = layers.Adam(graph, lr=0.1)
        for _ in range(3):
            graph.zero_grad()
            ad.backward(ad.tsum(ad.rows(table, np.array([0, 1, 2]))))
            opt.step()
        assert (table.data[0] == 0.0).all()
        assert (table.data[1:] != 1.0).any()


class TestContainerRoundTrip:
    def test_save_load_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=(7,)),
                   "scalar": np.array(2.5)}
        path = tmp_path / "ckpt.ntc"
        from newsrec import container
        container.save_tensors(path, tensors)
        back = container.load_tensors(path)
        assert list(back) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])

    def test_bad_magic(self, tmp_path):
        from newsrec import container
        p = tmp_path / "bad.ntc"
        p.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(container.BadMagic):
            container.load_tensors(p)

    def test_truncated(self, tmp_path):
        from newsrec import container
        p = tmp_path / "ok.ntc"
        container.save_tensors(p, {"a": np.ones((4, 4))})
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(container.TruncatedFile):
            container.load_tensors(p)
