import json

import numpy as np
import pytest

from rpmalign.nncore import (
    AdamState,
    CheckpointError,
    ParamBundle,
    Tensor,
    adam_step,
    dense,
    grad_check,
    group_norm,
    l2_normalize,
    load_checkpoint,
    max_pool,
    no_grad,
    relu,
    save_checkpoint,
    segment_max,
    softplus,
    GN_EPS,
)
from rpmalign.nncore import tensor as tt


def scalar_fd(fn, params, h=1e-6):
    """Standalone central-difference helper for small cases."""
    out = {}
    for name, t in params.tensors.items():
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(params).data)
            flat[i] = orig - h
            fm = float(fn(params).data)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


class TestTensorBasics:
    def test_shape_value_consistency(self, rng):
        t = Tensor(rng.normal(size=(3, 4)))
        assert t.shape == (3, 4)
        assert t.data.size == 12
        assert t.data.dtype == np.float64

    def test_backward_requires_scalar(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (t * 2.0).backward()

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = tt.add(tt.mul(x, x), x)  # x^2 + x
        y.backward()
        assert x.grad == pytest.approx(7.0)

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        with no_grad():
            y = tt.mul(x, x)
        assert not y.requires_grad
        assert y._vjp is None

    def test_detach(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = x.detach()
        assert not y.requires_grad

    def test_broadcasting_gradients(self, rng):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        tt.tensor_sum(tt.mul(a, b)).backward()
        assert a.grad.shape == (4, 3)
        assert b.grad.shape == (1, 3)
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0, keepdims=True))


class TestDense:
    def test_identity_weights(self, rng):
        x = rng.normal(size=(5, 3))
        out = dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_computed(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        w = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
        b = Tensor(np.array([1.0, 1.0]))
        np.testing.assert_allclose(dense(x, w, b).data, [[2.0, 5.0]])

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            dense(Tensor(rng.normal(size=(2, 3))),
                  Tensor(rng.normal(size=(4, 2))), Tensor(np.zeros(2)))

    def test_gradient(self, rng):
        c = rng.normal(size=(4, 2))
        params = ParamBundle({
            "x": Tensor(rng.normal(size=(4, 3)), requires_grad=True),
            "w": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
            "b": Tensor(rng.normal(size=2), requires_grad=True),
        })

        def fn(p):
            return tt.tensor_sum(tt.mul(dense(p["x"], p["w"], p["b"]),
                                        tt.constant(c)))

        report = grad_check(fn, params)
        assert report.max_rel_err <= 1e-6


class TestActivations:
    def test_relu_definition(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        tt.tensor_sum(relu(x)).backward()
        assert x.grad[0] == 0.0

    def test_softplus_closed_form(self):
        assert softplus(Tensor(np.array(0.0))).item() == pytest.approx(
            np.log(2.0), abs=1e-15)

    def test_softplus_no_overflow(self):
        assert softplus(Tensor(np.array(50.0))).item() == pytest.approx(
            50.0, abs=1e-9)
        assert np.isfinite(softplus(Tensor(np.array(800.0))).item())

    def test_softplus_strictly_positive(self, rng):
        x = rng.normal(size=100) * 50.0
        assert (softplus(Tensor(x)).data > 0.0).all()


class TestGroupNorm:
    def test_constant_input_zeros(self):
        x = Tensor(np.full((3, 4), 7.0))
        out = group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_group_hand_case(self):
        x = Tensor(np.array([[1.0, 3.0, 10.0, 30.0]]))
        out = group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        scale1 = 1.0 / np.sqrt(1.0 + GN_EPS)  # group (1,3): var 1
        scale2 = 10.0 / np.sqrt(100.0 + GN_EPS)  # group (10,30): var 100
        np.testing.assert_allclose(
            out.data, [[-scale1, scale1, -scale2, scale2]], atol=1e-12)
        np.testing.assert_allclose(np.abs(out.data), 1.0, atol=1e-4)

    def test_indivisible_channels(self, rng):
        with pytest.raises(ValueError):
            group_norm(Tensor(rng.normal(size=(2, 5))), 2,
                       Tensor(np.ones(5)), Tensor(np.zeros(5)))

    def test_scale_invariance(self, rng):
        x = rng.normal(size=(4, 8))
        gain, shift = Tensor(np.ones(8)), Tensor(np.zeros(8))
        a = group_norm(Tensor(x), 4, gain, shift)
        b = group_norm(Tensor(x * 37.5), 4, gain, shift)
        np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_gradient(self, rng):
        c = rng.normal(size=(4, 8))
        params = ParamBundle({
            "x": Tensor(rng.normal(size=(4, 8)), requires_grad=True),
            "gain": Tensor(rng.uniform(0.5, 2.0, size=8), requires_grad=True),
            "shift": Tensor(rng.normal(size=8), requires_grad=True),
        })

        def fn(p):
            return tt.tensor_sum(tt.mul(
                group_norm(p["x"], 4, p["gain"], p["shift"]), tt.constant(c)))

        assert grad_check(fn, params).max_rel_err <= 1e-5


class TestPooling:
    def test_single_row(self, rng):
        x = rng.normal(size=(1, 4))
        out, arg = max_pool(Tensor(x))
        np.testing.assert_array_equal(out.data, x[0])
        assert (arg == 0).all()

    def test_definition(self):
        out, _ = max_pool(Tensor(np.array([[1.0, 5.0], [3.0, 2.0]])))
        np.testing.assert_array_equal(out.data, [3.0, 5.0])

    def test_tie_routes_to_first(self):
        x = Tensor(np.array([[2.0], [2.0]]), requires_grad=True)
        out, arg = max_pool(x)
        assert arg[0] == 0
        tt.tensor_sum(out).backward()
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0]])

    def test_gradient(self, rng):
        c = rng.normal(size=6)
        params = ParamBundle(
            {"x": Tensor(rng.normal(size=(5, 6)), requires_grad=True)})

        def fn(p):
            pooled, _ = max_pool(p["x"])
            return tt.tensor_sum(tt.mul(pooled, tt.constant(c)))

        assert grad_check(fn, params).max_rel_err <= 1e-6

    def test_segment_max_matches_loop(self, rng):
        x = rng.normal(size=(20, 3))
        starts = np.array([0, 4, 9, 20])
        out = segment_max(Tensor(x), starts)
        for s in range(3):
            np.testing.assert_array_equal(
                out.data[s], x[starts[s]: starts[s + 1]].max(axis=0))


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(Tensor(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_zero_vector_stays_zero(self):
        out = l2_normalize(Tensor(np.zeros((1, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))
        assert np.isfinite(out.data).all()

    def test_gradient_away_from_zero(self, rng):
        c = rng.normal(size=(3, 4))
        x = rng.normal(size=(3, 4))
        x += np.sign(x) * 0.3
        params = ParamBundle({"x": Tensor(x, requires_grad=True)})

        def fn(p):
            return tt.tensor_sum(tt.mul(l2_normalize(p["x"]), tt.constant(c)))

        assert grad_check(fn, params).max_rel_err <= 1e-6


class TestAdam:
    def test_zero_gradient_keeps_params(self, rng):
        params = ParamBundle({"w": Tensor(rng.normal(size=(3, 2)),
                                          requires_grad=True)})
        state = AdamState.fresh(params)
        new_params, new_state = adam_step(
            params, {"w": np.zeros((3, 2))}, state, lr=0.1)
        np.testing.assert_array_equal(new_params["w"].data, params["w"].data)
        assert new_state.step == 1

    def test_first_step_hand_value(self):
        params = ParamBundle({"w": Tensor(np.array(0.0), requires_grad=True)})
        state = AdamState.fresh(params)
        new_params, _ = adam_step(params, {"w": np.array(1.0)}, state, lr=0.1)
        assert new_params["w"].data == pytest.approx(-0.1 / (1.0 + 1e-8),
                                                     abs=1e-15)

    def test_deterministic_trajectory(self, rng):
        def run():
            r = np.random.default_rng(7)
            params = ParamBundle({"w": Tensor(r.normal(size=(4, 3)),
                                              requires_grad=True)})
            state = AdamState.fresh(params)
            for _ in range(100):
                g = {"w": r.normal(size=(4, 3))}
                params, state = adam_step(params, g, state, lr=1e-3)
            return params["w"].data

        a, b = run(), run()
        assert (a == b).all()

    def test_shape_mismatch(self, rng):
        params = ParamBundle({"w": Tensor(rng.normal(size=(3,)),
                                          requires_grad=True)})
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.zeros((4,))},
                      AdamState.fresh(params), lr=0.1)


class TestGradCheck:
    def test_quadratic(self):
        params = ParamBundle({"x": Tensor(np.array(3.0), requires_grad=True)})
        report = grad_check(lambda p: tt.mul(p["x"], p["x"]), params)
        assert report.worst.analytic == pytest.approx(6.0, abs=1e-12)
        assert report.worst.numeric == pytest.approx(6.0, abs=1e-9)

    def test_dense_relu_composite(self, rng):
        x = rng.normal(size=(6, 4)) + 0.2
        params = ParamBundle({
            "w": Tensor(rng.normal(size=(4, 3)), requires_grad=True),
            "b": Tensor(rng.normal(size=3) + 0.5, requires_grad=True),
        })

        def fn(p):
            return tt.tensor_sum(relu(dense(tt.constant(x), p["w"], p["b"])))

        assert grad_check(fn, params).max_rel_err <= 1e-5

    def test_matches_standalone_fd(self, rng):
        params = ParamBundle({
            "a": Tensor(rng.normal(size=(3, 2)), requires_grad=True)})

        def fn(p):
            return tt.tensor_sum(tt.tensor_exp(tt.mul(p["a"], 0.5)))

        fn(params).backward()
        fd = scalar_fd(fn, params)
        np.testing.assert_allclose(params["a"].grad, fd["a"], atol=1e-7)

    def test_nonfinite_rejected(self):
        params = ParamBundle({"x": Tensor(np.array(1.0), requires_grad=True)})
        with pytest.raises(FloatingPointError):
            grad_check(lambda p: tt.tensor_log(tt.sub(p["x"], 2.0)), params)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = ParamBundle({
            "feat.w": Tensor(rng.normal(size=(3, 4)), requires_grad=True),
            "feat.b": Tensor(rng.normal(size=4), requires_grad=True),
        })
        state = AdamState.fresh(params)
        state, arch = AdamState(m=state.m, v=state.v, step=17), {"widths": [3, 4]}
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, arch, state)
        params2, arch2, state2 = load_checkpoint(path)
        assert arch2 == arch
        assert state2.step == 17
        for name in params.names():
            assert (params2[name].data == params[name].data).all()

    def test_optional_adam_state(self, tmp_path, rng):
        params = ParamBundle({"w": Tensor(rng.normal(size=2),
                                          requires_grad=True)})
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, {})
        _, _, state = load_checkpoint(path)
        assert state is None

    def test_schema_validates(self, tmp_path, rng):
        jsonschema = pytest.importorskip("jsonschema")
        from pathlib import Path
        import rpmalign

        schema = json.loads(
            (Path(rpmalign.__file__).parent / "schemas"
             / "checkpoint.schema.json").read_text())
        params = ParamBundle({"w": Tensor(rng.normal(size=(2, 2)),
                                          requires_grad=True)})
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, {"pre": [2, 2]}, AdamState.fresh(params))
        jsonschema.validate(json.loads(path.read_text()), schema)

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        path.write_text(json.dumps({"format_version": 1}))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_value_count_mismatch(self, tmp_path):
        doc = {"format_version": 1, "architecture_config": {},
               "parameters": {"w": {"shape": [3], "values": [1.0, 2.0]}}}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
