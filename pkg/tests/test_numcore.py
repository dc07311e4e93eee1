import math
import threading

import numpy as np
import pytest

from peftlab.core import numcore as nc
from peftlab.core.errors import DataError, ShapeError, StateError
from tests.conftest import assert_grads_match, numeric_grad


def param(data):
    return nc.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def all_coords(tensor):
    return list(np.ndindex(tensor.shape))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestForward:
    def test_matmul_identity(self):
        out = nc.matmul(nc.Tensor(np.eye(2)), nc.Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_matmul_projector_selects_row(self):
        out = nc.matmul(nc.Tensor([[1, 0], [0, 0]]), nc.Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_matmul_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(nc.matmul(nc.Tensor(a), nc.Tensor(b)).data, expected, rtol=1e-12)

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 3))))

    def test_layer_norm_constant_row_is_zero(self):
        out = nc.layer_norm(nc.Tensor([[1.0, 1.0, 1.0, 1.0]]), nc.Tensor(np.ones(4)), nc.Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_layer_norm_scales_unit_row(self):
        out = nc.layer_norm(nc.Tensor([[-1.0, 1.0]]), nc.Tensor([2.0, 2.0]), nc.Tensor([0.0, 0.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-2.0, 2.0]], atol=1e-9)

    def test_layer_norm_zero_gamma_returns_beta(self, rng):
        beta = rng.normal(size=5)
        out = nc.layer_norm(nc.Tensor(rng.normal(size=(3, 5))), nc.Tensor(np.zeros(5)), nc.Tensor(beta))
        np.testing.assert_allclose(out.data, np.tile(beta, (3, 1)))

    def test_cross_entropy_uniform_logits(self):
        loss = nc.softmax_cross_entropy(nc.Tensor(np.zeros((1, 4))), [2])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_cross_entropy_saturated_target(self):
        logits = np.zeros((1, 4))
        logits[0, 1] = 1000.0
        assert nc.softmax_cross_entropy(nc.Tensor(logits), [1]).item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_ignores_masked_positions(self, rng):
        logits = rng.normal(size=(2, 5))
        both = nc.softmax_cross_entropy(nc.Tensor(logits), [3, nc.IGNORE_INDEX]).item()
        single = nc.softmax_cross_entropy(nc.Tensor(logits[:1]), [3]).item()
        assert both == pytest.approx(single, abs=1e-15)

    def test_cross_entropy_all_ignored(self):
        with pytest.raises(DataError, match="no supervised positions"):
            nc.softmax_cross_entropy(nc.Tensor(np.zeros((2, 3))), [nc.IGNORE_INDEX, nc.IGNORE_INDEX])

    def test_embedding_out_of_range(self):
        with pytest.raises(DataError):
            nc.embedding(nc.Tensor(np.zeros((4, 2))), [0, 4])

    def test_add_broadcasts_trailing_vector(self):
        out = nc.add(nc.Tensor(np.zeros((2, 3))), nc.Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_add_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            nc.add(nc.Tensor(np.zeros((2, 3))), nc.Tensor(np.zeros(2)))


class TestAttention:
    def test_causal_mask(self, rng):
        q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
        base = nc.causal_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(v), n_heads=2).data
        k2, v2 = k.copy(), v.copy()
        k2[3:] += 10.0
        v2[3:] -= 10.0
        changed = nc.causal_attention(nc.Tensor(q), nc.Tensor(k2), nc.Tensor(v2), n_heads=2).data
        np.testing.assert_allclose(base[:3], changed[:3], rtol=0, atol=1e-14)
        assert not np.allclose(base[3:], changed[3:])

    def test_prefix_rows_are_visible_and_weights_normalize(self, rng):
        q, k, v = (nc.Tensor(rng.normal(size=(3, 4))) for _ in range(3))
        kp, vp = nc.Tensor(rng.normal(size=(2, 4))), nc.Tensor(rng.normal(size=(2, 4)))
        out, weights = nc.causal_attention(q, k, v, 2, kp, vp, return_weights=True)
        assert out.shape == (3, 4)
        assert weights.shape == (2, 3, 5)
        np.testing.assert_allclose(weights.sum(axis=-1), np.ones((2, 3)), atol=1e-12)
        assert np.all(weights[:, :, :2] > 0)
        assert np.all(weights[:, 0, 3:] == 0)

    def test_matches_hand_built_concatenation(self, rng):
        q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
        kp, vp = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        out = nc.causal_attention(nc.Tensor(q), nc.Tensor(k), nc.Tensor(v), 1, nc.Tensor(kp), nc.Tensor(vp)).data
        keys, values = np.vstack([kp, k]), np.vstack([vp, v])
        expected = np.zeros((3, 4))
        for t in range(3):
            scores = keys[: 2 + t + 1] @ q[t] / 2.0
            w = np.exp(scores - scores.max())
            w /= w.sum()
            expected[t] = w @ values[: 2 + t + 1]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_prefix_must_come_in_pairs(self, rng):
        q = nc.Tensor(rng.normal(size=(2, 4)))
        with pytest.raises(ShapeError):
            nc.causal_attention(q, q, q, 2, nc.Tensor(np.zeros((1, 4))), None)


class TestBackward:
    def test_square(self):
        x = param([3.0])
        nc.backward(nc.sum_all(nc.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_sum_of_matmul(self, rng):
        a, b = param(rng.normal(size=(3, 4))), nc.Tensor(rng.normal(size=(4, 2)))
        nc.backward(nc.sum_all(nc.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)

    def test_grads_accumulate(self):
        x = param([2.0])
        nc.backward(nc.sum_all(nc.mul(x, x)))
        nc.backward(nc.sum_all(nc.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_tape_is_consumed(self):
        x = param([1.0, 2.0])
        nc.backward(nc.sum_all(nc.scale(x, 2.0)))
        assert len(nc.get_tape()) == 0

    def test_non_scalar_loss(self):
        x = param([1.0, 2.0])
        with pytest.raises(ShapeError):
            nc.backward(nc.scale(x, 2.0))
        nc.get_tape().clear()

    def test_empty_tape(self):
        with pytest.raises(StateError):
            nc.backward(param([1.0]))

    def test_no_grad_records_nothing(self):
        x = param([1.0])
        with nc.no_grad():
            out = nc.mul(x, x)
        assert not out.requires_grad
        assert len(nc.get_tape()) == 0

    def test_tape_is_thread_local(self):
        x = param([1.0])
        nc.mul(x, x)
        seen = []
        worker = threading.Thread(target=lambda: seen.append(len(nc.get_tape())))
        worker.start()
        worker.join()
        assert seen == [0]
        nc.get_tape().clear()


class TestGradients:
    """Central differences against backward() for every primitive."""

    def check(self, build, tensors):
        for tensor in tensors:
            tensor.zero_grad()
        nc.backward(build())
        for tensor in tensors:
            coords = all_coords(tensor)
            assert_grads_match([tensor.grad[c] for c in coords], numeric_grad(build, tensor, coords))

    def test_add_mul_scale(self, rng):
        a, b, v = param(rng.normal(size=(3, 4))), param(rng.normal(size=(3, 4))), param(rng.normal(size=4))
        self.check(lambda: nc.sum_all(nc.scale(nc.mul(nc.add(nc.mul(a, b), v), a), 0.7)), [a, b, v])

    def test_matmul_transpose(self, rng):
        a, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(2, 4)))
        w = nc.Tensor(rng.normal(size=(3, 2)))
        self.check(lambda: nc.sum_all(nc.mul(nc.matmul(a, nc.transpose(b)), w)), [a, b])

    def test_gelu(self, rng):
        x = param(rng.normal(size=(2, 5)) * 2)
        w = nc.Tensor(rng.normal(size=(2, 5)))
        self.check(lambda: nc.sum_all(nc.mul(nc.gelu(x), w)), [x])

    def test_layer_norm(self, rng):
        x, g, b = param(rng.normal(size=(3, 6))), param(rng.normal(size=6)), param(rng.normal(size=6))
        w = nc.Tensor(rng.normal(size=(3, 6)))
        self.check(lambda: nc.sum_all(nc.mul(nc.layer_norm(x, g, b), w)), [x, g, b])

    def test_embedding_concat_slice(self, rng):
        table, extra = param(rng.normal(size=(5, 4))), param(rng.normal(size=(2, 4)))
        w = nc.Tensor(rng.normal(size=(5, 2)))

        def build():
            rows = nc.concat([extra, nc.embedding(table, [1, 3, 1])])
            return nc.sum_all(nc.mul(nc.slice_cols(rows, 1, 3), w))

        self.check(build, [table, extra])

    def test_attention_with_prefix(self, rng):
        q, k, v = (param(rng.normal(size=(4, 6))) for _ in range(3))
        kp, vp = param(rng.normal(size=(2, 6))), param(rng.normal(size=(2, 6)))
        w = nc.Tensor(rng.normal(size=(4, 6)))
        self.check(lambda: nc.sum_all(nc.mul(nc.causal_attention(q, k, v, 3, kp, vp), w)), [q, k, v, kp, vp])

    def test_cross_entropy(self, rng):
        logits = param(rng.normal(size=(4, 7)))
        self.check(lambda: nc.softmax_cross_entropy(logits, [2, nc.IGNORE_INDEX, 6, 0]), [logits])


def test_allocator_tracks_peak():
    stats = nc.allocation_stats()
    stats.reset_peak()
    before = stats.live_bytes
    big = nc.Tensor(np.zeros(1000))
    assert stats.peak_bytes >= before + 8000
    del big
    assert stats.live_bytes <= before + 8000


def test_release_is_charged_to_allocating_thread():
    handed = {}

    def allocate():
        handed["stats"] = nc.allocation_stats()
        handed["tensor"] = nc.Tensor(np.zeros(1000))

    worker = threading.Thread(target=allocate)
    worker.start()
    worker.join()
    worker_stats, main_stats = handed["stats"], nc.allocation_stats()
    assert worker_stats is not main_stats
    worker_before, main_before = worker_stats.live_bytes, main_stats.live_bytes
    del handed["tensor"]
    assert worker_stats.live_bytes == worker_before - 8000
    assert main_stats.live_bytes == main_before
