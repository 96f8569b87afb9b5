import math

import numpy as np
import pytest

from dnq.autograd import (
    Graph,
    GraphError,
    ShapeError,
    Tensor,
    backward,
    ce_label_smoothing,
    forward,
    grad_check,
    relu_kink_risk,
)


def make_linear_graph(w, b):
    g = Graph()
    i = g.add("input", "data")
    g.add("linear", "fc", inputs=(i,), params=("fc.weight", "fc.bias"))
    params = {"fc.weight": Tensor(w), "fc.bias": Tensor(b)}
    return g, params


class TestForward:
    def test_identity_graph(self):
        g = Graph()
        g.add("input", "data")
        out, _ = forward(g, {"data": np.array([[1.0, 2.0, 3.0]])}, {})
        np.testing.assert_array_equal(out, [[1.0, 2.0, 3.0]])

    def test_identity_weights(self):
        g, p = make_linear_graph([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        out, _ = forward(g, {"data": np.array([[5.0, 7.0]])}, p)
        np.testing.assert_allclose(out, [[5.0, 7.0]])

    def test_hand_evaluated_affine(self):
        # W=[[2]], b=[1], x=[3] -> 2*3 + 1 = 7
        g, p = make_linear_graph([[2.0]], [1.0])
        out, _ = forward(g, {"data": np.array([[3.0]])}, p)
        np.testing.assert_allclose(out, [[7.0]])

    def test_shape_mismatch_names_node(self):
        g, p = make_linear_graph([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        with pytest.raises(ShapeError, match="fc"):
            forward(g, {"data": np.zeros((1, 3))}, p)

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(0)
        g, p = make_linear_graph(rng.normal(size=(4, 3)), rng.normal(size=4))
        x = rng.normal(size=(5, 3)).astype(np.float32)
        a, _ = forward(g, {"data": x}, p)
        b, _ = forward(g, {"data": x}, p)
        assert a.tobytes() == b.tobytes()

    def test_linearity_of_linear_graph(self):
        # No bias, no nonlinearity: forward(a*x) == a*forward(x)
        rng = np.random.default_rng(1)
        g, p = make_linear_graph(rng.normal(size=(4, 3)), np.zeros(4))
        x = rng.normal(size=(2, 3))
        base, _ = forward(g, {"data": x}, p, dtype=np.float64)
        scaled, _ = forward(g, {"data": 2.5 * x}, p, dtype=np.float64)
        np.testing.assert_allclose(scaled, 2.5 * base, rtol=1e-12)

    def test_all_ops_finite_on_finite_inputs(self):
        rng = np.random.default_rng(2)
        g = Graph()
        i = g.add("input", "data")
        c1 = g.add("conv2d", "conv1", inputs=(i,), params=("conv1.weight", "conv1.bias"), padding=1)
        r1 = g.add("relu", "relu1", inputs=(c1,))
        p1 = g.add("avgpool", "pool1", inputs=(r1,), pool=2)
        f1 = g.add("flatten", "flatten1", inputs=(p1,))
        g.add("linear", "fc", inputs=(f1,), params=("fc.weight", "fc.bias"))
        params = {
            "conv1.weight": Tensor(rng.normal(size=(3, 1, 3, 3))),
            "conv1.bias": Tensor(rng.normal(size=3)),
            "fc.weight": Tensor(rng.normal(size=(5, 3 * 4 * 4))),
            "fc.bias": Tensor(rng.normal(size=5)),
        }
        x = rng.normal(size=(2, 1, 8, 8)).astype(np.float32)
        out, _ = forward(g, {"data": x}, params)
        assert out.shape == (2, 5)
        assert np.isfinite(out).all()


class TestCrossEntropy:
    def test_uniform_logits_smoothing_independent(self):
        # Uniform softmax makes the loss eps-independent: exactly ln 2.
        assert ce_label_smoothing([0.0, 0.0], 0, 0.1) == pytest.approx(math.log(2), rel=1e-12)
        assert ce_label_smoothing([0.0, 0.0], 0, 0.0) == pytest.approx(math.log(2), rel=1e-12)

    def test_confident_correct(self):
        # -log softmax([10,-10])_0 = log(1 + e^-20) ~= 2.061e-9
        val = ce_label_smoothing([10.0, -10.0], 0, 0.0)
        assert val == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
        assert val == pytest.approx(2.061e-9, rel=1e-3)

    def test_four_way_symmetry(self):
        for eps in (0.0, 0.1, 0.5):
            assert ce_label_smoothing([0.0, 0.0, 0.0, 0.0], 2, eps) == pytest.approx(math.log(4), rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ce_label_smoothing([0.0, 0.0], 2, 0.0)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            ce_label_smoothing([0.0, 0.0], 0, 1.0)


class TestBackward:
    def test_square_param(self):
        # loss = w^2 at w=3 -> dloss/dw = 6; data=1 makes the linear output
        # equal the weight itself
        g = Graph()
        i = g.add("input", "data")
        l1 = g.add("linear", "w", inputs=(i,), params=("w.weight", "w.bias"))
        m = g.add("mul", "sq", inputs=(l1, l1))
        g.add("sum", "loss", inputs=(m,))
        params = {"w.weight": Tensor([[3.0]]), "w.bias": Tensor([0.0])}
        _, cache = forward(g, {"data": np.array([[1.0]])}, params)
        grads = backward(g, cache, params)
        assert grads["w.weight"][0, 0] == pytest.approx(6.0)

    def test_relu_subgradient(self):
        # loss = sum(relu(w)) with w=[-1, 2] -> grad [0, 1]
        g = Graph()
        i = g.add("input", "data")
        l1 = g.add("linear", "w", inputs=(i,), params=("w.weight", "w.bias"))
        r = g.add("relu", "relu1", inputs=(l1,))
        g.add("sum", "loss", inputs=(r,))
        params = {"w.weight": Tensor([[-1.0], [2.0]]), "w.bias": Tensor([0.0, 0.0])}
        _, cache = forward(g, {"data": np.array([[1.0]])}, params)
        grads = backward(g, cache, params)
        np.testing.assert_allclose(grads["w.weight"].reshape(-1), [0.0, 1.0])

    def test_relu_gradient_zero_at_kink(self):
        g = Graph()
        i = g.add("input", "data")
        l1 = g.add("linear", "w", inputs=(i,), params=("w.weight", "w.bias"))
        r = g.add("relu", "relu1", inputs=(l1,))
        g.add("sum", "loss", inputs=(r,))
        params = {"w.weight": Tensor([[0.0]]), "w.bias": Tensor([0.0])}
        _, cache = forward(g, {"data": np.array([[1.0]])}, params)
        grads = backward(g, cache, params)
        assert grads["w.weight"][0, 0] == 0.0

    def test_backward_before_forward_errors(self):
        g, p = make_linear_graph([[1.0]], [0.0])
        from dnq.autograd import Cache

        with pytest.raises(GraphError, match="before forward"):
            backward(g, Cache(), p)

    def test_unused_parameter_gets_zero_grad(self):
        g = Graph()
        i = g.add("input", "data")
        l1 = g.add("linear", "w", inputs=(i,), params=("w.weight", "w.bias"))
        g.add("sum", "loss", inputs=(l1,))
        params = {
            "w.weight": Tensor([[2.0]]),
            "w.bias": Tensor([0.0]),
            "unused": Tensor([5.0, 5.0]),
        }
        _, cache = forward(g, {"data": np.array([[1.0]])}, params)
        grads = backward(g, cache, params)
        np.testing.assert_array_equal(grads["unused"], [0.0, 0.0])


def _random_graph(kind: str, rng):
    """Small randomized graphs covering every differentiable op kind."""
    g = Graph()
    i = g.add("input", "data")
    params = {}
    if kind == "mlp":
        h = int(rng.integers(2, 6))
        d = int(rng.integers(2, 5))
        k = int(rng.integers(2, 4))
        l1 = g.add("linear", "fc1", inputs=(i,), params=("fc1.weight", "fc1.bias"))
        r1 = g.add("relu", "relu1", inputs=(l1,))
        l2 = g.add("linear", "fc2", inputs=(r1,), params=("fc2.weight", "fc2.bias"))
        labels = g.add("input", "labels")
        g.add("ce_smooth", "loss", inputs=(l2, labels), eps=float(rng.uniform(0, 0.3)))
        params = {
            "fc1.weight": Tensor(rng.normal(size=(h, d))),
            "fc1.bias": Tensor(rng.normal(size=h) + 0.5),
            "fc2.weight": Tensor(rng.normal(size=(k, h))),
            "fc2.bias": Tensor(rng.normal(size=k)),
        }
        x = rng.normal(size=(3, d))
        inputs = {"data": x, "labels": rng.integers(0, k, size=3)}
    elif kind == "cnn":
        c = int(rng.integers(1, 3))
        l1 = g.add("conv2d", "conv1", inputs=(i,), params=("conv1.weight", "conv1.bias"), padding=1)
        r1 = g.add("relu", "relu1", inputs=(l1,))
        p1 = g.add("avgpool", "pool1", inputs=(r1,), pool=2)
        f1 = g.add("flatten", "flatten1", inputs=(p1,))
        l2 = g.add("linear", "fc", inputs=(f1,), params=("fc.weight", "fc.bias"))
        labels = g.add("input", "labels")
        g.add("ce_smooth", "loss", inputs=(l2, labels), eps=0.1)
        params = {
            "conv1.weight": Tensor(rng.normal(size=(c, 1, 3, 3))),
            "conv1.bias": Tensor(rng.normal(size=c) + 0.3),
            "fc.weight": Tensor(rng.normal(size=(2, c * 2 * 2))),
            "fc.bias": Tensor(rng.normal(size=2)),
        }
        inputs = {"data": rng.normal(size=(2, 1, 4, 4)), "labels": rng.integers(0, 2, size=2)}
    else:  # elementwise: add, mul, scale, sum
        d = int(rng.integers(2, 5))
        l1 = g.add("linear", "w", inputs=(i,), params=("w.weight", "w.bias"))
        sq = g.add("mul", "sq", inputs=(l1, l1))
        sh = g.add("add", "sh", inputs=(sq, l1))
        sc = g.add("scale", "sc", inputs=(sh,), c=0.5)
        g.add("sum", "loss", inputs=(sc,))
        params = {
            "w.weight": Tensor(rng.normal(size=(d, d))),
            "w.bias": Tensor(rng.normal(size=d)),
        }
        inputs = {"data": rng.normal(size=(2, d))}
    return g, inputs, params


class TestGradCheck:
    def test_quadratic_bowl(self):
        # loss = sum(w*w): analytic gradient 2w, exact under finite differences
        g = Graph()
        i = g.add("input", "data")
        l1 = g.add("linear", "w", inputs=(i,), params=("w.weight", "w.bias"))
        m = g.add("mul", "sq", inputs=(l1, l1))
        g.add("sum", "loss", inputs=(m,))
        params = {"w.weight": Tensor([[1.5], [-2.0], [0.7]]), "w.bias": Tensor(np.zeros(3))}
        rep = grad_check(g, {"data": np.array([[1.0]])}, params, tolerance=1e-4)
        assert rep.passed, rep.message
        assert rep.max_rel_err < 1e-4

    def test_two_layer_mlp(self):
        rng = np.random.default_rng(7)
        g, inputs, params = _random_graph("mlp", rng)
        total = sum(t.size for t in params.values())
        assert total < 100
        rep = grad_check(g, inputs, params, tolerance=1e-3)
        assert rep.passed, rep.message

    def test_zero_parameter_graph(self):
        g = Graph()
        i = g.add("input", "data")
        g.add("sum", "loss", inputs=(i,))
        rep = grad_check(g, {"data": np.array([[1.0, 2.0]])}, {}, tolerance=1e-3)
        assert rep.passed

    def test_refuses_large_graphs(self):
        g, p = make_linear_graph(np.zeros((200, 100)), np.zeros(200))
        with pytest.raises(GraphError, match="1e4"):
            grad_check(g, {"data": np.zeros((1, 100))}, p)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_fails_with_diagnostic(self):
        g, p = make_linear_graph([[np.inf]], [0.0])
        rep = grad_check(g, {"data": np.array([[1.0]])}, p, tolerance=1e-3)
        assert not rep.passed
        assert "non-finite" in rep.message

    @pytest.mark.parametrize("kind", ["mlp", "cnn", "elementwise"])
    def test_randomized_graphs_64bit_tolerance(self, kind):
        # With float64 evaluation the oracle should agree to 1e-6
        hits = 0
        for trial in range(4):
            rng = np.random.default_rng(100 + trial)
            g, inputs, params = _random_graph(kind, rng)
            _, cache = forward(g, inputs, params, dtype=np.float64)
            if relu_kink_risk(cache, g):
                continue
            rep = grad_check(g, inputs, params, tolerance=1e-6)
            assert rep.passed, f"{kind} trial {trial}: {rep.message}"
            hits += 1
        assert hits >= 2
