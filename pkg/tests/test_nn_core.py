"""Neural core: forward vs a scalar reference, exact backprop vs finite
differences, Adam, and the checkpoint container."""
from __future__ import annotations

import math

import numpy as np
import pytest

from notecoder.errors import CheckpointError, ConfigError, ShapeError
from notecoder.nn_core import (
    AdamState,
    ConvSpec,
    DenseSpec,
    NetSpec,
    adam_step,
    backward,
    backward_batch,
    bce_loss,
    bce_loss_batch,
    forward,
    forward_batch,
    grad_check,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)


def reference_forward(emb, params, spec, aux=None):
    """Independent scalar re-implementation: plain Python triple loops."""
    length, dim = emb.shape
    pooled = []
    for w in spec.conv.kernel_widths:
        kernel = params[f"conv{w}.w"]
        bias = params[f"conv{w}.b"]
        for f in range(spec.conv.filters_per_width):
            best = -math.inf
            for t in range(length - w + 1):
                acc = bias[f]
                for i in range(w):
                    for d in range(dim):
                        acc += emb[t + i, d] * kernel[i, d, f]
                acc = max(acc, 0.0)
                if acc > best:
                    best = acc
            pooled.append(best)
    x = list(pooled) + ([] if aux is None else [float(a) for a in aux])
    for li, layer in enumerate(spec.dense_layers()):
        weight = params[f"dense{li}.w"]
        bias = params[f"dense{li}.b"]
        nxt = []
        for o in range(layer.out_dim):
            acc = bias[o]
            for i, xi in enumerate(x):
                acc += xi * weight[i, o]
            if layer.activation == "relu":
                acc = max(acc, 0.0)
            elif layer.activation == "sigmoid":
                acc = 1.0 / (1.0 + math.exp(-acc))
            nxt.append(acc)
        x = nxt
    return np.asarray(x)


def small_spec(aux_dim=0, hidden=6, widths=(2, 3), filters=4, dim=8, out=5):
    return NetSpec(
        conv=ConvSpec(kernel_widths=widths, filters_per_width=filters, input_dim=dim),
        out_dim=out,
        hidden_dim=hidden,
        aux_dim=aux_dim,
    )


class TestForward:
    def test_zero_net_outputs_exactly_half(self):
        spec = small_spec()
        params = {k: np.zeros(s) for k, s in param_shapes(spec).items()}
        probs, _ = forward(np.zeros((12, 8)), params, spec)
        assert np.all(probs == 0.5)

    def test_probs_in_open_unit_interval(self):
        rng = np.random.default_rng(0)
        spec = small_spec()
        params = init_params(spec, seed=1)
        for _ in range(10):
            probs, _ = forward(rng.normal(size=(12, 8)), params, spec)
            assert np.all((probs > 0) & (probs < 1))
            assert np.all(np.isfinite(probs))

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            spec = small_spec(aux_dim=0 if trial % 2 else 3)
            params = init_params(spec, seed=trial)
            emb = rng.normal(size=(10, 8))
            aux = rng.normal(size=3) if spec.aux_dim else None
            probs, _ = forward(emb, params, spec, aux)
            ref = reference_forward(emb, params, spec, aux)
            assert np.max(np.abs(probs - ref)) < 1e-10

    def test_shape_errors(self):
        spec = small_spec()
        params = init_params(spec, seed=0)
        with pytest.raises(ShapeError):
            forward(np.zeros((12, 9)), params, spec)
        with pytest.raises(ShapeError):
            forward(np.zeros((2, 8)), params, spec)  # shorter than widest kernel
        with pytest.raises(ShapeError):
            forward(np.zeros((12, 8)), params, spec, aux=np.zeros(3))
        bad = dict(params)
        bad.pop("conv2.b")
        with pytest.raises(ShapeError):
            forward(np.zeros((12, 8)), bad, spec)


class TestBceLoss:
    def test_half_prediction_gives_ln2(self):
        assert abs(bce_loss(np.array([0.5]), np.array([1.0])) - math.log(2)) < 1e-12

    def test_perfect_prediction_is_tiny(self):
        probs = np.array([1.0 - 1e-7, 1e-7])
        labels = np.array([1.0, 0.0])
        assert bce_loss(probs, labels) <= 1e-6

    def test_matches_scalar_formula(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            p = rng.uniform(0.001, 0.999, size=7)
            y = (rng.random(7) < 0.5).astype(float)
            expected = np.mean(
                [-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p, y)]
            )
            assert abs(bce_loss(p, y) - expected) < 1e-12

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.uniform(1e-6, 1 - 1e-6, size=4)
            y = (rng.random(4) < 0.5).astype(float)
            assert bce_loss(p, y) >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(np.array([0.5, 0.5]), np.array([1.0]))


class TestBackward:
    def test_gradients_finite(self):
        rng = np.random.default_rng(4)
        spec = small_spec()
        params = init_params(spec, seed=4)
        probs, cache = forward(rng.normal(size=(12, 8)), params, spec)
        grads = backward(cache, (rng.random(5) < 0.5).astype(float))
        assert set(grads) == set(params)
        for name, g in grads.items():
            assert g.shape == params[name].shape
            assert np.all(np.isfinite(g))

    def test_near_zero_grads_at_matched_labels(self):
        # labels equal to the post-clamp probabilities make dense biases'
        # gradient vanish (p - y == 0 at the output)
        spec = small_spec()
        params = init_params(spec, seed=5)
        probs, cache = forward(np.random.default_rng(5).normal(size=(12, 8)), params, spec)
        grads = backward(cache, probs.copy())
        last = max(i for i in range(2))
        assert np.max(np.abs(grads["dense1.b"])) < 1e-12

    def test_label_shape_mismatch(self):
        spec = small_spec()
        params = init_params(spec, seed=6)
        _, cache = forward(np.zeros((12, 8)), params, spec)
        with pytest.raises(ShapeError):
            backward(cache, np.zeros(4))

    def test_stale_cache_rejected(self):
        with pytest.raises(ConfigError):
            backward({"conv": {}}, np.zeros(5))

    def test_pool_tie_routing_is_stable(self):
        # identical rows at positions 0/1 and 4/5 produce tied windows; the
        # gradient must ignore permutations of the non-argmax tied positions
        spec = small_spec(widths=(2,), filters=3, dim=4, out=2, hidden=0)
        params = init_params(spec, seed=7)
        rng = np.random.default_rng(8)
        row_a, row_b, row_c = rng.normal(size=(3, 4))
        emb1 = np.stack([row_a, row_a, row_b, row_c, row_a, row_a])
        emb2 = np.stack([row_a, row_a, row_c, row_b, row_a, row_a])
        labels = np.array([1.0, 0.0])
        g1 = backward(forward(emb1, params, spec)[1], labels)
        g2 = backward(forward(emb2, params, spec)[1], labels)
        # conv windows over (a,a) at positions 0 and 4 tie; swapping the b/c
        # middle changes other windows but tied-window routing stays put
        p1, _ = forward(emb1, params, spec)
        p2, _ = forward(emb2, params, spec)
        if np.allclose(p1, p2):
            for name in g1:
                assert np.allclose(g1[name], g2[name])


class TestGradCheck:
    def test_random_configs_pass(self):
        rng = np.random.default_rng(10)
        for trial in range(4):
            spec = small_spec(
                aux_dim=3 if trial == 2 else 0,
                widths=(2, 3) if trial % 2 else (1, 2),
                filters=3,
                dim=6,
                out=4,
            )
            params = init_params(spec, seed=trial + 40)
            emb = rng.normal(size=(9, 6))
            labels = (rng.random(4) < 0.5).astype(float)
            aux = rng.normal(size=3) if spec.aux_dim else None
            assert grad_check(params, emb, labels, spec, aux=aux) < 1e-4

    def test_nearly_linear_net_is_tighter(self):
        spec = NetSpec(
            conv=ConvSpec(kernel_widths=(1,), filters_per_width=3, input_dim=5),
            out_dim=3,
            hidden_dim=4,
            hidden_activation="identity",
        )
        params = init_params(spec, seed=50)
        rng = np.random.default_rng(11)
        emb = rng.normal(size=(2, 5))
        labels = np.array([1.0, 0.0, 1.0])
        assert grad_check(params, emb, labels, spec) < 1e-6

    def test_coarse_step_is_worse(self):
        spec = small_spec(widths=(2,), filters=3, dim=5, out=3)
        params = init_params(spec, seed=51)
        rng = np.random.default_rng(12)
        emb = rng.normal(size=(8, 5))
        labels = np.array([1.0, 0.0, 1.0])
        fine = grad_check(params, emb, labels, spec, h=1e-5)
        coarse = grad_check(params, emb, labels, spec, h=1e-2)
        assert coarse > fine

    def test_invalid_step(self):
        spec = small_spec()
        with pytest.raises(ConfigError):
            grad_check(init_params(spec, 0), np.zeros((12, 8)), np.zeros(5), spec, h=0.0)


class TestAdam:
    def test_single_scalar_hand_computed(self):
        params = {"w": np.array([0.0])}
        state = AdamState.init(params)
        adam_step(params, {"w": np.array([1.0])}, state)
        # m-hat = 1, v-hat = 1 after bias correction, so the step is
        # -lr / (1 + eps)
        expected = -1e-3 * (1.0 / (1.0 + 1e-8))
        assert abs(params["w"][0] - expected) < 1e-15
        assert state.t == 1

    def test_zero_gradient_keeps_params(self):
        params = {"w": np.array([1.5, -2.0])}
        state = AdamState.init(params)
        adam_step(params, {"w": np.zeros(2)}, state)
        assert np.array_equal(params["w"], np.array([1.5, -2.0]))

    def test_two_runs_bit_identical(self):
        def run():
            spec = small_spec()
            params = init_params(spec, seed=3)
            state = AdamState.init(params, lr=1e-2)
            rng = np.random.default_rng(9)
            for _ in range(5):
                emb = rng.normal(size=(12, 8))
                labels = (rng.random(5) < 0.5).astype(float)
                _, cache = forward(emb, params, spec)
                adam_step(params, backward(cache, labels), state)
            return params

        a, b = run(), run()
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        state = AdamState.init(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"w": np.zeros(4)}, state)
        with pytest.raises(ShapeError):
            adam_step(params, {"v": np.zeros(3)}, AdamState.init(params))

    def test_hyperparameter_validation(self):
        with pytest.raises(ConfigError):
            AdamState.init({"w": np.zeros(1)}, beta1=1.0)


class TestBatchedOps:
    def test_forward_batch_matches_singles(self):
        rng = np.random.default_rng(20)
        spec = small_spec(aux_dim=3)
        params = init_params(spec, seed=20)
        embs = rng.normal(size=(6, 12, 8))
        auxs = rng.normal(size=(6, 3))
        batch_probs, _ = forward_batch(embs, params, spec, auxs)
        for i in range(6):
            single, _ = forward(embs[i], params, spec, auxs[i])
            # BLAS blocking differs between the batched and single paths, so
            # agreement is to the last couple of ulps rather than bitwise
            assert np.max(np.abs(batch_probs[i] - single)) < 1e-12

    def test_backward_batch_is_mean_of_singles(self):
        rng = np.random.default_rng(21)
        spec = small_spec()
        params = init_params(spec, seed=21)
        embs = rng.normal(size=(5, 12, 8))
        labels = (rng.random((5, 5)) < 0.5).astype(float)
        _, cache = forward_batch(embs, params, spec)
        batch_grads = backward_batch(cache, labels)
        acc = {k: np.zeros_like(v) for k, v in params.items()}
        for i in range(5):
            _, c = forward(embs[i], params, spec)
            for k, g in backward(c, labels[i]).items():
                acc[k] += g
        for k in acc:
            assert np.max(np.abs(batch_grads[k] - acc[k] / 5)) < 1e-12

    def test_loss_batch_matches_mean(self):
        rng = np.random.default_rng(22)
        p = rng.uniform(0.01, 0.99, size=(4, 6))
        y = (rng.random((4, 6)) < 0.5).astype(float)
        mean_single = np.mean([bce_loss(p[i], y[i]) for i in range(4)])
        assert abs(bce_loss_batch(p, y) - mean_single) < 1e-12


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = small_spec()
        params = init_params(spec, seed=30)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, spec, meta={"seed": 30, "val_f1": 0.5})
        loaded, loaded_spec, meta = load_checkpoint(path)
        assert loaded_spec == spec
        assert meta == {"seed": 30, "val_f1": 0.5}
        for name, tensor in params.items():
            assert loaded[name].dtype == np.float32
            assert np.array_equal(loaded[name], tensor.astype(np.float32))

    def test_truncated_payload_fails_checksum(self, tmp_path):
        spec = small_spec()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, init_params(spec, 0), spec)
        data = path.read_bytes()
        path.write_bytes(data[:-20])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_garbage_header_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\xff\xfe not json\n1234")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestSpecs:
    def test_dense_layer_plan(self):
        spec = small_spec(aux_dim=2, hidden=6)
        layers = spec.dense_layers()
        assert layers[0] == DenseSpec(8 + 2, 6, "relu")
        assert layers[1] == DenseSpec(6, 5, "sigmoid")
        no_hidden = small_spec(hidden=0)
        assert no_hidden.dense_layers() == [DenseSpec(8, 5, "sigmoid")]

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            ConvSpec(kernel_widths=())
        with pytest.raises(ConfigError):
            DenseSpec(1, 1, "tanh")

    def test_netspec_json_round_trip(self):
        spec = small_spec(aux_dim=4)
        assert NetSpec.from_dict(spec.to_dict()) == spec
