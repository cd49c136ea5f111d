import csv

import numpy as np
import pytest

from lib.errors import ContractError, DimensionError, SizeError
from lib.scan import (
    ComplexSeq,
    DecaySeq,
    ScanElement,
    compose,
    export_mixing_csv,
    make_elements,
    mixing_matrix,
    parallel_scan,
    recurrence,
    run_scan,
    scan_backward,
    sequential_scan,
    toeplitz_deviation,
)
from lib.tensor import Tape, Tensor, mul, sum_all


def random_case(rng, n, d, lead=()):
    shape = lead + (n, d)
    decay = DecaySeq(rng.uniform(0.0, 1.0, size=shape), rng.uniform(-np.pi, np.pi, size=d))
    c = ComplexSeq(rng.standard_normal(shape), rng.standard_normal(shape))
    return decay, c


def rel(x, y):
    scale = max(np.abs(y.re).max(), np.abs(y.im).max(), 1e-300)
    return max(np.abs(x.re - y.re).max(), np.abs(x.im - y.im).max()) / scale


def element(a, b, d=1):
    a, b = complex(a), complex(b)
    return ScanElement(np.full(d, a.real), np.full(d, a.imag), np.full(d, b.real), np.full(d, b.imag))


class TestElements:
    def test_pure_input(self):
        decay = DecaySeq(np.zeros((1, 2)), np.array([0.3, 1.2]))
        c = ComplexSeq(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]))
        e = make_elements(decay, c)
        np.testing.assert_array_equal(e.a_re, 0.0)
        np.testing.assert_array_equal(e.a_im, 0.0)
        np.testing.assert_array_equal(e.b_re, c.re)
        np.testing.assert_array_equal(e.b_im, c.im)

    def test_pure_memory(self):
        theta = np.array([0.3, 1.2])
        decay = DecaySeq(np.ones((1, 2)), theta)
        e = make_elements(decay, ComplexSeq(np.ones((1, 2)), np.ones((1, 2))))
        np.testing.assert_allclose(e.a_re[0], np.cos(theta))
        np.testing.assert_allclose(e.a_im[0], np.sin(theta))
        np.testing.assert_array_equal(e.b_re, 0.0)

    def test_quarter_turn(self):
        decay = DecaySeq(np.full((1, 1), 0.5), np.array([np.pi / 2]))
        e = make_elements(decay, ComplexSeq(np.ones((1, 1)), np.zeros((1, 1))))
        np.testing.assert_allclose([e.a_re[0, 0], e.a_im[0, 0]], [0.0, 0.5], atol=1e-16)
        np.testing.assert_allclose([e.b_re[0, 0], e.b_im[0, 0]], [0.5, 0.0])

    def test_rotation_keeps_magnitude(self, rng):
        decay, c = random_case(rng, 32, 8)
        e = make_elements(decay, c)
        np.testing.assert_allclose(np.hypot(e.a_re, e.a_im), decay.lam, atol=1e-15)

    def test_lambda_out_of_range(self):
        decay = DecaySeq(np.array([[1.5]]), np.array([0.0]))
        with pytest.raises(ContractError):
            make_elements(decay, ComplexSeq(np.ones((1, 1)), np.ones((1, 1))))

    def test_shape_mismatch(self):
        decay = DecaySeq(np.full((2, 3), 0.5), np.zeros(3))
        with pytest.raises(DimensionError):
            make_elements(decay, ComplexSeq(np.ones((2, 2)), np.ones((2, 2))))


class TestCompose:
    def test_identity(self):
        e = element(0.3 + 0.4j, 2.0 - 1.0j)
        out = compose(ScanElement.identity((1,)), e)
        for field in ('a_re', 'a_im', 'b_re', 'b_im'):
            np.testing.assert_array_equal(getattr(out, field), getattr(e, field))

    def test_real_case(self):
        out = compose(element(0.25, 3.0), element(0.5, 1.0))
        assert out.a_re[0] == 0.125
        assert out.b_re[0] == 3.25

    def test_associativity(self, rng):
        def draw():
            lam = rng.uniform(0, 1, size=(1000, 4))
            theta = rng.uniform(-np.pi, np.pi, size=(1000, 4))
            return ScanElement(lam * np.cos(theta), lam * np.sin(theta),
                               rng.standard_normal((1000, 4)), rng.standard_normal((1000, 4)))

        e1, e2, e3 = draw(), draw(), draw()
        left = compose(compose(e3, e2), e1)
        right = compose(e3, compose(e2, e1))
        for field in ('a_re', 'a_im', 'b_re', 'b_im'):
            np.testing.assert_allclose(getattr(left, field), getattr(right, field), atol=1e-12)


class TestScanEquivalence:
    @pytest.mark.parametrize('n', [1, 2, 3, 7, 64, 256])
    @pytest.mark.parametrize('d', [1, 4, 16])
    def test_three_way_agreement(self, n, d):
        rng = np.random.default_rng(n * 100 + d)
        decay, c = random_case(rng, n, d)
        seq = sequential_scan(decay, c)
        par = parallel_scan(decay, c)
        mat = mixing_matrix(decay, n).apply(c)
        assert rel(par, seq) < 1e-10
        assert rel(mat, seq) < 1e-10
        assert rel(mat, par) < 1e-10

    def test_random_instances_over_grid(self):
        rng = np.random.default_rng(2024)
        lengths, widths = [1, 2, 3, 7, 64, 256, 1024], [1, 4, 16]
        for _ in range(200):
            n, d = int(rng.choice(lengths)), int(rng.choice(widths))
            decay, c = random_case(rng, n, d)
            seq = sequential_scan(decay, c)
            assert rel(parallel_scan(decay, c), seq) < 1e-10, (n, d)
            if n <= 256:
                assert rel(mixing_matrix(decay, n).apply(c), seq) < 1e-10, (n, d)

    def test_long_sequence(self, rng):
        decay, c = random_case(rng, 1024, 4)
        assert rel(parallel_scan(decay, c), sequential_scan(decay, c)) < 1e-10

    def test_batch_lanes_are_independent(self, rng):
        decay, c = random_case(rng, 37, 3, lead=(4,))
        batched = sequential_scan(decay, c)
        np.testing.assert_allclose(parallel_scan(decay, c).re, batched.re, atol=1e-12)
        single = sequential_scan(DecaySeq(decay.lam[2], decay.theta), ComplexSeq(c.re[2], c.im[2]))
        np.testing.assert_array_equal(batched.re[2], single.re)

    def test_run_scan_threshold(self, rng):
        decay, c = random_case(rng, 20, 3)
        low = run_scan(decay, c, parallel_threshold=4)
        high = run_scan(decay, c, parallel_threshold=64)
        assert rel(low, high) < 1e-12

    def test_parallel_needs_a_step(self):
        decay = DecaySeq(np.zeros((0, 2)), np.zeros(2))
        with pytest.raises(ContractError):
            parallel_scan(decay, ComplexSeq.zeros((0, 2)))

    def test_convex_combination_bound(self, rng):
        decay, c = random_case(rng, 200, 8)
        h = sequential_scan(decay, c)
        assert np.all(h.magnitude().max(axis=0) <= c.magnitude().max(axis=0) + 1e-12)

    def test_carried_state_continues_a_sequence(self, rng):
        decay, c = random_case(rng, 30, 5)
        full = sequential_scan(decay, c)
        first = sequential_scan(DecaySeq(decay.lam[:12], decay.theta), ComplexSeq(c.re[:12], c.im[:12]))
        h0 = (first.re[-1], first.im[-1])
        rest_decay = DecaySeq(decay.lam[12:], decay.theta)
        rest_c = ComplexSeq(c.re[12:], c.im[12:])
        for scan in (sequential_scan, parallel_scan):
            rest = scan(rest_decay, rest_c, h0=h0)
            np.testing.assert_allclose(rest.re, full.re[12:], atol=1e-12)
            np.testing.assert_allclose(rest.im, full.im[12:], atol=1e-12)


class TestMixingMatrix:
    def test_toeplitz_with_shared_theta(self, rng):
        decay, _ = random_case(rng, 128, 6)
        assert toeplitz_deviation(mixing_matrix(decay, 128)) <= 1e-12

    def test_per_step_theta_breaks_toeplitz(self, rng):
        lam = rng.uniform(0, 1, size=(48, 4))
        decay = DecaySeq(lam, rng.uniform(-np.pi, np.pi, size=(48, 4)))
        assert toeplitz_deviation(mixing_matrix(decay, 48)) > 1e-3

    def test_per_step_theta_matches_scan(self, rng):
        lam = rng.uniform(0, 1, size=(24, 3))
        decay = DecaySeq(lam, rng.uniform(-np.pi, np.pi, size=(24, 3)))
        c = ComplexSeq(rng.standard_normal((24, 3)), rng.standard_normal((24, 3)))
        assert rel(mixing_matrix(decay, 24).apply(c), sequential_scan(decay, c)) < 1e-10

    def test_lower_triangular(self, rng):
        decay, _ = random_case(rng, 10, 2)
        mix = mixing_matrix(decay, 10)
        upper = np.triu_indices(10, k=1)
        np.testing.assert_array_equal(mix.re[:, upper[0], upper[1]], 0.0)

    def test_materialization_cap(self, rng):
        decay, _ = random_case(rng, 16, 2)
        with pytest.raises(SizeError):
            mixing_matrix(decay, 16, cap=8)

    def test_csv_export(self, rng, tmp_path):
        decay, _ = random_case(rng, 5, 3)
        paths = export_mixing_csv(mixing_matrix(decay, 5), [0, 2], tmp_path)
        assert [p.name for p in paths] == ['mixing_dim0.csv', 'mixing_dim2.csv']
        with open(paths[0], newline='') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['t'] + [f'{part}_{s}' for s in range(5) for part in ('re', 'im')]
        assert len(rows) == 6
        assert all(len(r) == 11 for r in rows)

    def test_csv_export_rejects_bad_dim(self, rng, tmp_path):
        decay, _ = random_case(rng, 4, 2)
        with pytest.raises(DimensionError):
            export_mixing_csv(mixing_matrix(decay, 4), [5], tmp_path)


def _loss_of_scan(decay, c, w_re, w_im):
    h = sequential_scan(decay, c)
    return float((h.re * w_re).sum() + (h.im * w_im).sum())


class TestBackward:
    def test_matches_finite_differences(self, rng, rel_error):
        n, d = 9, 3
        lam = rng.uniform(0.05, 0.95, size=(n, d))
        theta = rng.uniform(-np.pi, np.pi, size=d)
        c_re, c_im = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        w_re, w_im = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        decay, c = DecaySeq(lam, theta), ComplexSeq(c_re, c_im)

        h = sequential_scan(decay, c)
        grad_lam, grad_theta, grad_c = scan_backward(decay, c, h, ComplexSeq(w_re, w_im))

        def loss():
            return _loss_of_scan(decay, c, w_re, w_im)

        for analytic, array in ((grad_lam, lam), (grad_theta, theta), (grad_c.re, c_re), (grad_c.im, c_im)):
            numeric = _fd(loss, array)
            assert rel_error(analytic, numeric) < 1e-7

    @pytest.mark.parametrize('threshold', [0, 512])
    @pytest.mark.parametrize('per_step_theta', [False, True])
    def test_recurrence_primitive(self, threshold, per_step_theta, rng, f64, numeric_grad, rel_error):
        batch, n, d = 2, 5, 3
        rows = batch * n
        lam = Tensor(rng.uniform(0.05, 0.95, size=(rows, d)), requires_grad=True)
        theta_shape = (rows, d) if per_step_theta else (d,)
        theta = Tensor(rng.uniform(-np.pi, np.pi, size=theta_shape), requires_grad=True)
        b_re = Tensor(rng.standard_normal((rows, d)), requires_grad=True)
        b_im = Tensor(rng.standard_normal((rows, d)), requires_grad=True)
        weights = Tensor(rng.standard_normal((rows, 2 * d)))

        def build():
            return sum_all(mul(recurrence(lam, theta, b_re, b_im, batch, threshold), weights))

        with Tape() as tape:
            loss = build()
        tape.backward(loss)
        for t in (lam, theta, b_re, b_im):
            assert rel_error(t.grad, numeric_grad(lambda: build().item(), t)) < 1e-7

    def test_recurrence_output_layout(self, rng):
        n, d = 6, 2
        decay, c = random_case(rng, n, d)
        out = recurrence(Tensor(decay.lam), Tensor(decay.theta), Tensor(c.re), Tensor(c.im), 1)
        a_re, a_im = decay.lam * np.cos(decay.theta), decay.lam * np.sin(decay.theta)
        h_re = np.zeros(d)
        h_im = np.zeros(d)
        for t in range(n):
            h_re, h_im = a_re[t] * h_re - a_im[t] * h_im + c.re[t], a_re[t] * h_im + a_im[t] * h_re + c.im[t]
        np.testing.assert_allclose(out.values[-1], np.concatenate([h_re, h_im]), atol=1e-12)


def _fd(loss, array, step=1e-6):
    flat = array.reshape(-1)
    out = np.zeros(flat.shape)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = loss()
        flat[i] = original - step
        lower = loss()
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * step)
    return out.reshape(array.shape)
