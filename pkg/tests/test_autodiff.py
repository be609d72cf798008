import numpy as np
import pytest

from gspib import autodiff as ad

from conftest import fd_gradient, rel_err


def check_grad(build, x0, tol=1.0e-5, h=1.0e-6):
    """FD-check d(scalar output)/d(leaf) for a tape built by ``build(leaf)``."""
    leaf = ad.parameter(x0)
    out = build(leaf)
    out.backward()
    got = leaf.grad.copy()

    def f(x):
        return build(ad.Tensor(x)).values.item()

    want = fd_gradient(f, np.array(x0, dtype=np.float64), h=h)
    assert rel_err(got, want) <= tol


class TestArithmetic:
    def test_add_broadcast(self, rng):
        b = rng.normal(size=(1, 4))
        check_grad(lambda x: ad.tsum(ad.square(x + ad.Tensor(b))), rng.normal(size=(3, 4)))

    def test_sub_scalar(self, rng):
        check_grad(lambda x: ad.tsum(ad.square(x - 0.7)), rng.normal(size=(5,)))

    def test_mul_div(self, rng):
        c = rng.normal(size=(3, 2)) + 3.0
        check_grad(lambda x: ad.tsum(x * ad.Tensor(c) / (x + 5.0)), rng.normal(size=(3, 2)))

    def test_matmul(self, rng):
        w = rng.normal(size=(4, 3))
        check_grad(lambda x: ad.tsum(ad.square(x @ ad.Tensor(w))), rng.normal(size=(2, 4)))

    def test_matmul_weight_grad(self, rng):
        x = rng.normal(size=(2, 4))
        check_grad(lambda w: ad.tsum(ad.square(ad.Tensor(x) @ w)), rng.normal(size=(4, 3)))


class TestShapes:
    def test_concat_axis1(self, rng):
        y = rng.normal(size=(3, 2))
        check_grad(lambda x: ad.tsum(ad.square(ad.concat([x, ad.Tensor(y)], axis=1))),
                   rng.normal(size=(3, 2)))

    def test_gather(self, rng):
        idx = np.array([2, 0, 0, 1])
        check_grad(lambda x: ad.tsum(ad.square(ad.gather(x, idx))), rng.normal(size=(3, 2)))

    def test_col_slice(self, rng):
        check_grad(lambda x: ad.tsum(ad.square(ad.col_slice(x, 1, 3))), rng.normal(size=(2, 4)))

    def test_take_per_row(self, rng):
        cols = np.array([1, 0, 2])
        check_grad(lambda x: ad.tsum(ad.square(ad.take_per_row(x, cols))),
                   rng.normal(size=(3, 3)))


class TestSegments:
    def test_segment_sum(self, rng):
        seg = np.array([0, 1, 1, 0, 2])
        check_grad(lambda x: ad.tsum(ad.square(ad.segment_sum(x, seg, 3))),
                   rng.normal(size=(5, 2)))

    def test_segment_mean(self, rng):
        seg = np.array([0, 0, 1, 1, 1])
        check_grad(lambda x: ad.tsum(ad.square(ad.segment_mean(x, seg, 2))),
                   rng.normal(size=(5, 3)))

    def test_segment_max(self, rng):
        seg = np.array([0, 0, 1, 1, 1, 2])
        check_grad(lambda x: ad.tsum(ad.square(ad.segment_max(x, seg, 3))),
                   rng.normal(size=(6, 2)))

    def test_segment_max_values(self):
        x = ad.Tensor([[1.0, 5.0], [3.0, 2.0], [0.0, -1.0]])
        out = ad.segment_max(x, np.array([0, 0, 1]), 2)
        assert np.allclose(out.values, [[3.0, 5.0], [0.0, -1.0]])

    def test_segment_softmax_rows_sum_to_one(self, rng):
        seg = np.array([0, 0, 0, 1, 1, 2])
        s = ad.parameter(rng.normal(size=6))
        w = ad.segment_softmax(s, seg, 3)
        sums = np.zeros(3)
        np.add.at(sums, seg, w.values)
        assert np.max(np.abs(sums - 1.0)) < 1.0e-12

    def test_segment_softmax_grad(self, rng):
        seg = np.array([0, 0, 1, 1])
        t = rng.normal(size=4)
        check_grad(lambda x: ad.tsum(ad.square(ad.segment_softmax(x, seg, 2) - ad.Tensor(t))),
                   rng.normal(size=4))


class TestElementwise:
    @pytest.mark.parametrize("op", [ad.sigmoid, ad.silu, ad.exp, ad.square,
                                    lambda x: ad.leaky_relu(x, 0.2)])
    def test_fd(self, op, rng):
        check_grad(lambda x: ad.tsum(op(x)), rng.normal(size=(4, 3)) + 0.05)

    def test_log(self, rng):
        check_grad(lambda x: ad.tsum(ad.log(x)), rng.uniform(0.5, 2.0, size=(3, 3)))

    def test_logsumexp_matches_direct(self, rng):
        x = rng.normal(size=(4, 5)) * 3
        out = ad.logsumexp(ad.Tensor(x), axis=1)
        want = np.log(np.exp(x).sum(axis=1, keepdims=True))
        assert np.allclose(out.values, want, atol=1.0e-12)

    def test_logsumexp_grad(self, rng):
        check_grad(lambda x: ad.tsum(ad.logsumexp(x, axis=1)), rng.normal(size=(3, 4)))

    def test_log_softmax_grad(self, rng):
        cols = np.array([0, 2, 1])
        check_grad(
            lambda x: -ad.tmean(ad.take_per_row(ad.log_softmax(x, axis=1), cols)),
            rng.normal(size=(3, 3)),
        )


class TestTape:
    def test_shared_parameter_accumulates_both_paths(self, rng):
        # same parameter feeding two branches: grad must be the sum of both
        w = rng.normal(size=(3, 3))

        def build(x):
            a = x @ ad.Tensor(w)
            b = ad.silu(x)
            return ad.tsum(ad.square(a)) + ad.tsum(a * b)

        check_grad(build, rng.normal(size=(2, 3)))

    def test_diamond_graph_exact(self):
        x = ad.parameter([2.0])
        y = ad.tsum(x * x + x)
        y.backward()
        assert np.allclose(x.grad, [5.0])  # 2x + 1

    def test_each_node_backward_called_once(self):
        calls = []
        x = ad.parameter([1.0, 2.0])
        mid = ad.silu(x)
        orig = mid._backward

        def counting(g):
            calls.append(1)
            orig(g)

        mid._backward = counting
        out = ad.tsum(mid * mid + mid)
        out.backward()
        assert len(calls) == 1

    def test_backward_requires_scalar(self):
        x = ad.parameter([[1.0, 2.0]])
        with pytest.raises(ValueError):
            ad.silu(x).backward()

    def test_deep_chain(self):
        x = ad.parameter([0.3])
        y = x
        for _ in range(500):
            y = ad.silu(y)
        ad.tsum(y).backward()
        assert np.isfinite(x.grad).all()


class TestReshape:
    def test_round_trip_gradient(self, rng):
        x = rng.standard_normal((4, 6))

        def f(v):
            t = ad.parameter(v.reshape(4, 6))
            y = ad.reshape(t, (4, 2, 3))
            z = ad.tsum(ad.square(ad.reshape(y, (24,))))
            return t, z

        t, z = f(x.ravel())
        z.backward()
        assert np.allclose(t.grad, 2.0 * x)

    def test_broadcast_through_reshape(self, rng):
        # (B,1,2) - (K,2) -> (B,K,2), the mixture-prior pattern
        z = ad.parameter(rng.standard_normal((5, 2)))
        m = ad.parameter(rng.standard_normal((3, 2)))
        d = ad.sub(ad.reshape(z, (5, 1, 2)), m)
        out = ad.tsum(ad.square(d))
        out.backward()
        zg = np.zeros((5, 2))
        mg = np.zeros((3, 2))
        for b in range(5):
            for k in range(3):
                diff = z.values[b] - m.values[k]
                zg[b] += 2 * diff
                mg[k] -= 2 * diff
        assert np.allclose(z.grad, zg)
        assert np.allclose(m.grad, mg)
