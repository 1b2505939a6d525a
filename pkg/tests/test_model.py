import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgnn_cna.cli import toy_instance
from hgnn_cna.graph_data import DynamicGraph, SampleSet, balanced_samples, init_features
from hgnn_cna.model import (
    ModelParams,
    StaleTraceError,
    backward,
    causal_loss_and_grads,
    causal_predict,
    checkpoint_bytes,
    decode_link,
    forward,
    l2_penalty,
    load_checkpoint,
    loss,
    objective,
    parse_checkpoint,
    predict,
    save_checkpoint,
)
from hgnn_cna.tensor_core import Transform
from hgnn_cna.train import grad_check


def small_model(g, seed=3, **kw):
    kw.setdefault("alpha", 0.01)
    return ModelParams.init(g.n_slots, g.n_features, hidden=4, n_layers=2, decoder_hidden=5, seed=seed, **kw)


def random_dg(seed, n=8, t=4, f=3, p=0.35):
    rng = np.random.default_rng(seed)
    upper = np.triu((rng.random((t, n, n)) < p).astype(float), 1)
    g = DynamicGraph(upper + upper.transpose(0, 2, 1))
    return g.with_features(init_features(g, f, seed=seed))


class TestForward:
    def test_zero_weights_half(self):
        g, _ = toy_instance()
        p = small_model(g)
        for w in p.weights:
            w[:] = 0
        np.testing.assert_array_equal(forward(g, p, Transform.identity(3)).H, 0.5)

    def test_two_layers_by_default(self):
        p = ModelParams.init(5, 32)
        assert p.n_layers == 2 and p.weights[0].shape == (5, 32, 32)
        assert p.cna.r_c == p.cna.r_a == 0.5

    def test_scalar_recursion(self):
        # one node, one slot: O = (r_c + r_a) * 1 and every product is scalar
        g = DynamicGraph(np.zeros((1, 1, 1)), np.array([[[0.8]]]))
        p = ModelParams.init(1, 1, hidden=1, n_layers=2, decoder_hidden=2, r_c=0.3, r_a=0.5, bias=False)
        p.weights[0][:] = 1.5
        p.weights[1][:] = -2.0
        sig = lambda x: 1 / (1 + np.exp(-x))
        want = sig(0.8 * -2.0 * sig(0.8 * 1.5 * 0.8))
        assert forward(g, p, Transform.identity(1)).H[0, 0, 0] == pytest.approx(want, rel=1e-14)

    def test_deterministic(self):
        g = random_dg(0)
        p = small_model(g)
        a = forward(g, p, Transform.dft(4)).H
        assert np.array_equal(a, forward(g, p, Transform.dft(4)).H)

    def test_permutation_equivariant(self):
        g = random_dg(1)
        p = small_model(g)
        perm = np.random.default_rng(1).permutation(g.n_nodes)
        gp = DynamicGraph(g.adjacency[:, perm][:, :, perm], g.features[:, perm])
        h = forward(g, p, Transform.identity(4)).H
        np.testing.assert_allclose(forward(gp, p, Transform.identity(4)).H, h[:, perm], atol=1e-12)

    def test_shape_checks(self):
        g = random_dg(2)
        with pytest.raises(ValueError):
            forward(g, ModelParams.init(g.n_slots, 5), Transform.identity(4))
        with pytest.raises(ValueError):
            ModelParams(
                weights=[np.zeros((2, 3, 4)), np.zeros((2, 5, 4))], biases=None, dec_W=np.zeros((8, 2)),
                dec_b=np.zeros(2), dec_w=np.zeros(2), dec_c=np.zeros(1), cna=small_model(g).cna,
            )


class TestDecoder:
    def test_zero_decoder_half(self):
        g = random_dg(3)
        p = small_model(g)
        for arr in (p.dec_W, p.dec_b, p.dec_w, p.dec_c):
            arr[:] = 0
        h = forward(g, p, Transform.identity(4)).H
        assert decode_link(h, 0, 1, 2, p) == 0.5

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_open_interval_and_order(self, seed):
        g = random_dg(seed % 50)
        p = small_model(g, seed=seed)
        p.dec_W *= 20
        h = forward(g, p, Transform.identity(4)).H
        probs = [decode_link(h, i, j, 1, p) for i in range(4) for j in range(4) if i != j]
        assert all(0 < v < 1 for v in probs)

    def test_asymmetric(self):
        g = random_dg(4)
        p = small_model(g)
        h = forward(g, p, Transform.identity(4)).H
        assert decode_link(h, 0, 3, 1, p) != decode_link(h, 3, 0, 1, p)

    def test_out_of_range(self):
        g = random_dg(5)
        p = small_model(g)
        h = forward(g, p, Transform.identity(4)).H
        with pytest.raises(IndexError):
            decode_link(h, 0, 99, 1, p)

    def test_lag_needs_history(self):
        g = random_dg(5)
        p = small_model(g)
        h = forward(g, p, Transform.identity(4)).H
        with pytest.raises(IndexError):
            predict(h, SampleSet(np.array([0]), np.array([1]), np.array([0]), np.ones(1)), p)


class TestLoss:
    def _samples(self, y):
        k = len(y)
        return SampleSet(np.zeros(k, int), np.ones(k, int), np.ones(k, int), np.asarray(y, float))

    def test_half_is_ln2(self):
        p = small_model(random_dg(6), alpha=0.0)
        assert loss(self._samples([1, 0, 1]), np.full(3, 0.5), p) == pytest.approx(np.log(2), rel=1e-15)

    def test_near_perfect(self):
        p = small_model(random_dg(6), alpha=0.0)
        assert loss(self._samples([1, 0]), np.array([1 - 1e-12, 1e-12]), p) < 1e-11

    def test_penalty_by_hand(self):
        p = small_model(random_dg(6), alpha=0.001)
        by_hand = sum(float(x) ** 2 for arr in p.tensors().values() for x in arr.ravel())
        assert l2_penalty(p) == pytest.approx(0.001 * by_hand, rel=1e-12)
        # three-parameter toy
        three = np.array([1.0, -2.0, 0.5])
        assert 0.001 * np.sum(three**2) == pytest.approx(0.00525)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            loss(SampleSet.empty(), np.zeros(0), small_model(random_dg(6)))


class TestBackward:
    @pytest.mark.parametrize("kind", ["identity", "dft"])
    @pytest.mark.parametrize("variant", ["default", "strict", "tanh", "frozen_beta"])
    def test_grad_check(self, kind, variant):
        g, samples = toy_instance()
        kw = {
            "default": {},
            "strict": {"bias": False},
            "tanh": {"activation": "tanh"},
            "frozen_beta": {"learn_beta": False},
        }[variant]
        p = small_model(g, **kw)
        rep = grad_check(g, p, samples, Transform.make(kind, g.n_slots))
        assert rep.passed, rep.errors
        assert rep.max_error < 1e-4

    def test_groups_covered(self):
        g, samples = toy_instance()
        rep = grad_check(g, small_model(g), samples, Transform.identity(3))
        assert set(rep.errors) == {"layer weights", "biases", "decoder", "g_edge", "g_node", "beta"}

    def test_corrupted_gradient_caught(self):
        g, samples = toy_instance()
        rep = grad_check(g, small_model(g), samples, Transform.dft(3), corrupt="cna.node_W")
        assert not rep.passed and "g_node" in rep.failing()

    def test_penalty_only(self):
        g, samples = toy_instance()
        p = small_model(g, alpha=0.3)
        _, with_pen = backward(forward(g, p, Transform.identity(3)), samples, p)
        _, without = backward(forward(g, p, Transform.identity(3)), samples, p, penalty=False)
        for name, arr in p.tensors().items():
            np.testing.assert_allclose(with_pen[name] - without[name], 0.6 * arr, rtol=1e-10, atol=1e-14)

    def test_stale_trace(self):
        g, samples = toy_instance()
        p = small_model(g)
        tr = forward(g, p, Transform.identity(3))
        p.touch()
        with pytest.raises(StaleTraceError):
            backward(tr, samples, p)

    def test_confident_correct_vanishes(self):
        g, samples = toy_instance()
        p = small_model(g, alpha=0.0)
        p.dec_c[:] = 50.0
        pos = samples.subset(samples.y == 1)
        _, grads = backward(forward(g, p, Transform.identity(3)), pos, p)
        assert max(np.max(np.abs(v)) for v in grads.values()) < 1e-15

    def test_ablation_isolation(self):
        g = random_dg(7)
        p = small_model(g, r_c=0.0, learn_beta=False)
        tf = Transform.dft(4)
        h = forward(g, p, tf).H
        rng = np.random.default_rng(0)
        for arr in p.cna.tensors().values():
            arr[:] = rng.normal(size=arr.shape)
        assert np.array_equal(forward(g, p, tf).H, h)
        _, grads = backward(forward(g, p, tf), balanced_samples(g, [1, 2], 0), p, penalty=False)
        assert all(not np.any(grads[k]) for k in p.cna.tensors())


class TestCausal:
    def _naive(self, g, p, s, tf):
        out = np.empty(len(s))
        for t in np.unique(s.t):
            sel = s.t == t
            h = forward(g.hide_after(int(t) - p.lag), p, tf).H
            out[sel] = predict(h, s.subset(sel), p)
        return out

    def test_matches_hidden_graph_loop(self):
        g = random_dg(8, n=7, t=5)
        p = small_model(g)
        tf = Transform.dft(5)
        s = balanced_samples(g, [2, 3, 4], 0)
        np.testing.assert_allclose(causal_predict(g, p, s, tf), self._naive(g, p, s, tf), rtol=1e-12)
        value, _ = causal_loss_and_grads(g, p, s, tf)
        assert value == pytest.approx(loss(s, self._naive(g, p, s, tf), p), rel=1e-12)

    def test_gradient_matches_differences(self):
        g = random_dg(9, n=6, t=4)
        p = small_model(g)
        tf = Transform.dft(4)
        s = balanced_samples(g, [2, 3], 0)
        _, grads = causal_loss_and_grads(g, p, s, tf)
        for name, arr in p.tensors().items():
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + 1e-5
                up = loss(s, self._naive(g, p, s, tf), p)
                arr[idx] = orig - 1e-5
                down = loss(s, self._naive(g, p, s, tf), p)
                arr[idx] = orig
                num[idx] = (up - down) / 2e-5
            err = np.max(np.abs(num - grads[name])) / max(np.max(np.abs(num)), 1e-12)
            assert err < 1e-4, name

    def test_future_does_not_leak(self):
        g = random_dg(10, n=6, t=5)
        p = small_model(g)
        tf = Transform.dft(5)
        s = balanced_samples(g, [2], 0)
        before = causal_predict(g, p, s, tf)
        a = g.adjacency.copy()
        a[2:] = 1 - a[2:]
        idx = np.arange(6)
        a[:, idx, idx] = 0
        changed = DynamicGraph(a, g.features)
        np.testing.assert_array_equal(causal_predict(changed, p, s, tf), before)

    def test_identity_single_pass(self):
        g = random_dg(11)
        p = small_model(g)
        s = balanced_samples(g, [1, 2, 3], 0)
        tf = Transform.identity(4)
        np.testing.assert_array_equal(causal_predict(g, p, s, tf), predict(forward(g, p, tf).H, s, p))
        assert objective(g, p, s, tf) == pytest.approx(causal_loss_and_grads(g, p, s, tf)[0], rel=1e-14)


class TestCheckpoint:
    @pytest.mark.parametrize("kw", [{}, {"bias": False, "learn_beta": False, "activation": "tanh"}])
    def test_roundtrip_bytes(self, tmp_path, kw):
        g = random_dg(12)
        p = small_model(g, **kw)
        save_checkpoint(tmp_path / "a.hcna", p, {"seed": 4})
        q, run = load_checkpoint(tmp_path / "a.hcna")
        assert run == {"seed": 4}
        save_checkpoint(tmp_path / "b.hcna", q, {"seed": 4})
        assert (tmp_path / "a.hcna").read_bytes() == (tmp_path / "b.hcna").read_bytes()
        np.testing.assert_array_equal(forward(g, q, Transform.dft(4)).H, forward(g, p, Transform.dft(4)).H)

    def test_header(self):
        raw = checkpoint_bytes(small_model(random_dg(13)))
        assert raw[:4] == b"HCNA" and int.from_bytes(raw[4:8], "little") == 1

    def test_corrupt(self):
        raw = checkpoint_bytes(small_model(random_dg(13)))
        with pytest.raises(ValueError):
            parse_checkpoint(b"XXXX" + raw[4:])
        with pytest.raises(ValueError):
            parse_checkpoint(raw + b"\0")
