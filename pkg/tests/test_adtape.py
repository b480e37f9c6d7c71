import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit

from app.engine.adtape import (
    Op,
    evaluate,
    gradient,
    hessian,
    record,
    value_and_gradient,
)
from app.engine.family import Family, log_terms
from app.engine.model import ParamState, h_loglik, record_h
from app.errors import (
    PatternMismatchError,
    TapeEvaluationError,
    UnsupportedOperationError,
)
from app.models.enums import FamilyKind
from tests.conftest import make_spec


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_hessian(grad, x, h=1e-5):
    n = x.size
    H = np.zeros((n, n))
    for j in range(n):
        e = np.zeros_like(x)
        e[j] = h
        H[:, j] = (grad(x + e) - grad(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def rosenbrock(x):
    a = x[np.arange(x.size - 1)]
    b = x[np.arange(1, x.size)]
    return (100.0 * (b - a * a) ** 2 + (1.0 - a) ** 2).sum()


class TestRecording:
    def test_value_matches_plain_numpy(self):
        x0 = np.array([0.3, -1.2, 2.0])
        tape = record(lambda x: (np.exp(x) * x - np.log(x * x + 1)).sum(), x0)
        expected = np.sum(np.exp(x0) * x0 - np.log(x0 * x0 + 1))
        assert tape.recorded_value == pytest.approx(expected, rel=1e-15)
        assert evaluate(tape, x0) == pytest.approx(expected, rel=1e-15)

    def test_reevaluates_at_new_point(self):
        tape = record(rosenbrock, np.zeros(4))
        x = np.array([1.0, 1.0, 1.0, 1.0])
        assert evaluate(tape, x) == pytest.approx(0.0, abs=1e-14)

    def test_dead_branches_pruned(self):
        def f(x):
            _unused = np.exp(x) * 3.0
            return (x * x).sum()

        tape = record(f, np.ones(3))
        assert tape.nodes[0].op is Op.INPUT
        assert all(n.op is not Op.EXP for n in tape.nodes)

    def test_matvec_and_division(self):
        A = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]])
        x0 = np.array([0.5, 1.5])
        tape = record(lambda x: (1.0 / (x.matvec(A) ** 2 + 1.0)).sum(), x0)
        expected = np.sum(1.0 / ((A @ x0) ** 2 + 1.0))
        assert evaluate(tape, x0) == pytest.approx(expected)


class TestErrors:
    def test_non_scalar_output(self):
        with pytest.raises(UnsupportedOperationError):
            record(lambda x: x * 2.0, np.ones(3))

    def test_unsupported_ufunc(self):
        with pytest.raises(UnsupportedOperationError):
            record(lambda x: np.sin(x).sum(), np.ones(2))

    def test_float_conversion_refused(self):
        with pytest.raises(UnsupportedOperationError):
            record(lambda x: float(x.sum()), np.ones(2))

    def test_non_finite_evaluation(self):
        tape = record(lambda x: np.log(x).sum(), np.ones(2))
        with pytest.raises(TapeEvaluationError):
            evaluate(tape, np.array([1.0, -1.0]))

    def test_wrong_input_length(self):
        tape = record(lambda x: x.sum(), np.ones(3))
        with pytest.raises(PatternMismatchError):
            evaluate(tape, np.ones(4))

    def test_pattern_from_other_tape(self):
        t1 = record(lambda x: (x * x).sum(), np.ones(2))
        t2 = record(lambda x: (x * x * x).sum(), np.ones(2))
        with pytest.raises(PatternMismatchError):
            hessian(t1, np.ones(2), t2.pattern)


class TestDerivatives:
    def test_rosenbrock_gradient_and_hessian(self):
        x = np.array([-1.2, 1.0, 0.4, 0.9, -0.3])
        tape = record(rosenbrock, x)
        g = gradient(tape, x)
        g_fd = fd_gradient(lambda z: evaluate(tape, z), x)
        assert_allclose(g, g_fd, rtol=1e-6)
        H = hessian(tape, x).toarray()
        H_fd = fd_hessian(lambda z: gradient(tape, z), x)
        assert_allclose(H, H_fd, rtol=1e-5, atol=1e-4)
        # tridiagonal structure is found and honored
        assert H[0, 2] == 0.0 and H[0, 4] == 0.0
        assert np.array_equal(H, H.T)

    @pytest.mark.parametrize("kind", list(FamilyKind))
    def test_h_derivatives_on_random_fixtures(self, kind):
        for seed in range(50 // len(FamilyKind) + 1):
            spec = make_spec(kind, seed=seed, n=30, q1=4, q2=3 * (seed % 2))
            lay = spec.layout
            rng = np.random.default_rng(100 + seed)
            theta = rng.normal(0.0, 0.3, lay.size)
            tape = record_h(spec, theta)

            def h(t):
                return h_loglik(spec, ParamState.unpack(lay, t))

            value, g = value_and_gradient(tape, theta)
            assert value == pytest.approx(h(theta), rel=1e-12)
            g_fd = fd_gradient(h, theta)
            assert_allclose(g, g_fd, rtol=1e-6, atol=1e-6)
            H = hessian(tape, theta).toarray()
            H_fd = fd_hessian(lambda t: gradient(tape, t), theta)
            assert_allclose(H, H_fd, rtol=1e-5, atol=1e-5)

    def test_single_factor_random_block_is_diagonal(self, poisson_single):
        lay = poisson_single.layout
        theta = ParamState.initial(poisson_single).pack(lay)
        tape = record_h(poisson_single, theta)
        pattern = tape.pattern.restrict(lay.random_index(False))
        assert pattern.block_is_diagonal(lay.q1)

    def test_restricted_hessian_uses_local_coordinates(self, poisson_single):
        lay = poisson_single.layout
        theta = ParamState.initial(poisson_single).pack(lay)
        tape = record_h(poisson_single, theta)
        idx = lay.random_index(False)
        sub = hessian(tape, theta, tape.pattern.restrict(idx)).toarray()
        full = hessian(tape, theta).toarray()
        assert sub.shape == (idx.size, idx.size)
        assert_allclose(sub, full[np.ix_(idx, idx)], rtol=0, atol=0)


class TestSoftplus:
    X = np.array([-800.0, -2.0, 0.0, 3.0, 800.0])

    def test_finite_at_extreme_arguments(self):
        tape = record(lambda x: x.softplus().sum(), self.X)
        expected = np.logaddexp(0.0, self.X).sum()
        assert evaluate(tape, self.X) == pytest.approx(expected, rel=1e-15)

    def test_derivatives(self):
        tape = record(lambda x: x.softplus().sum(), self.X)
        s = expit(self.X)
        assert_allclose(gradient(tape, self.X), s, rtol=1e-12)
        H = hessian(tape, self.X).toarray()
        assert_allclose(np.diag(H), s * (1.0 - s), rtol=1e-12)
        assert np.count_nonzero(H - np.diag(np.diag(H))) == 0

    def test_bernoulli_terms_record_at_large_eta(self):
        y = np.array([0.0, 1.0, 0.0, 1.0, 1.0])
        fam = Family(FamilyKind.BERNOULLI)
        tape = record(lambda x: log_terms(fam, y, x).sum(), self.X)
        expected = log_terms(fam, y, self.X).sum()
        assert evaluate(tape, self.X) == pytest.approx(expected, rel=1e-15)
        assert np.isfinite(expected)
