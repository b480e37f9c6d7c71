import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from app.engine.adtape import evaluate, gradient, record
from app.engine.family import (
    Family,
    eta_derivatives,
    log_density,
    log_terms,
    mean,
    validate_response,
)
from app.errors import FamilyDomainError
from app.models.enums import FamilyKind

POISSON = Family(FamilyKind.POISSON)
BERNOULLI = Family(FamilyKind.BERNOULLI)
GAUSSIAN = Family(FamilyKind.GAUSSIAN)


class TestLogDensity:
    def test_poisson_includes_normalizer(self):
        assert log_density(POISSON, 3, math.log(2.0)) == pytest.approx(
            stats.poisson.logpmf(3, 2.0), rel=1e-14
        )

    def test_bernoulli_at_zero(self):
        assert log_density(BERNOULLI, 1, 0.0) == pytest.approx(-math.log(2))

    def test_bernoulli_extreme_eta_is_finite(self):
        assert log_density(BERNOULLI, 0, 800.0) == pytest.approx(-800.0)
        assert log_density(BERNOULLI, 1, -800.0) == pytest.approx(-800.0)

    def test_gaussian_matches_scipy(self):
        y = np.array([0.3, -1.0, 2.5])
        eta = np.array([0.0, -0.5, 2.0])
        assert_allclose(
            log_density(GAUSSIAN, y, eta, phi=0.7),
            stats.norm.logpdf(y, eta, math.sqrt(0.7)),
            rtol=1e-14,
        )

    def test_family_of_accepts_strings(self):
        assert Family.of("poisson") == POISSON
        assert POISSON.link == "log"
        assert not GAUSSIAN.dispersion_known


class TestDomain:
    @pytest.mark.parametrize(
        "fam, y",
        [
            (POISSON, [1.0, -1.0]),
            (POISSON, [0.5]),
            (BERNOULLI, [0.0, 2.0]),
            (GAUSSIAN, [np.nan]),
        ],
    )
    def test_invalid_response(self, fam, y):
        with pytest.raises(FamilyDomainError):
            validate_response(fam, y)

    def test_gaussian_dispersion_must_be_positive(self):
        with pytest.raises(FamilyDomainError):
            log_density(GAUSSIAN, 0.0, 0.0, phi=0.0)


class TestDerivatives:
    @pytest.mark.parametrize("fam", [POISSON, BERNOULLI, GAUSSIAN])
    def test_eta_derivatives_match_tape(self, fam):
        y = np.array([0.0, 1.0, 1.0, 0.0])
        eta0 = np.array([-0.7, 0.1, 1.3, 2.0])
        tape = record(lambda e: log_terms(fam, y, e, 1.3).sum(), eta0)
        d1, d2 = eta_derivatives(fam, y, eta0, 1.3)
        assert_allclose(gradient(tape, eta0), d1, rtol=1e-12)
        assert evaluate(tape, eta0) == pytest.approx(
            np.sum(log_density(fam, y, eta0, 1.3))
        )
        assert np.all(d2 < 0)

    def test_scalar_inputs_give_floats(self):
        d1, d2 = eta_derivatives(POISSON, 2, 0.0)
        assert (d1, d2) == (1.0, -1.0)

    def test_mean_is_inverse_link(self):
        assert mean(BERNOULLI, 0.0) == 0.5
        assert mean(POISSON, 0.0) == 1.0
        assert mean(GAUSSIAN, 1.5) == 1.5
