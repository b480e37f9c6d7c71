import math

import numpy as np
import pytest
from scipy import stats

from app.engine.family import Family
from app.engine.model import (
    Dataset,
    GlmmSpec,
    ParamState,
    glm_loglik,
    h_loglik,
    linear_predictor,
)
from app.errors import (
    DimensionError,
    FamilyDomainError,
    NonFiniteLikelihoodError,
    StructureError,
)
from app.models.enums import FactorStructure, FamilyKind


def tiny(y=(0.0, 1.0, 2.0, 1.0), group2=None, q2=0) -> Dataset:
    n = len(y)
    return Dataset(
        y=np.asarray(y, dtype=float),
        offset=np.zeros(n),
        X=np.ones((n, 1)),
        group1=np.array([0, 0, 1, 1]),
        q1=2,
        group2=group2,
        q2=q2,
    )


class TestDataset:
    def test_shape_checks(self):
        with pytest.raises(DimensionError):
            Dataset(
                y=np.zeros(3),
                offset=np.zeros(2),
                X=np.ones((3, 1)),
                group1=np.zeros(3, dtype=int),
                q1=1,
            )

    def test_group_codes_in_range(self):
        with pytest.raises(DimensionError):
            Dataset(
                y=np.zeros(2),
                offset=np.zeros(2),
                X=np.ones((2, 1)),
                group1=np.array([0, 2]),
                q1=2,
            )

    @pytest.mark.parametrize("factor", ["group1", "group2"])
    def test_single_level_factor_rejected(self, factor):
        one = np.zeros(4, dtype=np.int64)
        two = np.array([0, 1, 0, 1])
        kwargs = {"group1": two, "q1": 2, "group2": two, "q2": 2}
        kwargs.update({factor: one, "q" + factor[-1]: 1})
        with pytest.raises(DimensionError, match="at least 2 levels"):
            Dataset(
                y=np.zeros(4), offset=np.zeros(4), X=np.ones((4, 1)), **kwargs
            )

    def test_missing_values_rejected(self):
        with pytest.raises(DimensionError):
            tiny(y=(0.0, np.nan, 1.0, 1.0))

    def test_structure_inferred(self):
        spec = GlmmSpec(Family(FamilyKind.POISSON), tiny())
        assert spec.factor_structure is FactorStructure.SINGLE
        crossed = GlmmSpec(
            Family(FamilyKind.POISSON),
            tiny(group2=np.array([0, 1, 0, 1]), q2=2),
        )
        assert crossed.factor_structure is FactorStructure.CROSSED
        assert crossed.levels == [2, 2]

    def test_structure_mismatch(self):
        with pytest.raises(StructureError):
            GlmmSpec(
                Family(FamilyKind.POISSON), tiny(), FactorStructure.CROSSED
            )

    def test_response_domain_checked(self):
        with pytest.raises(FamilyDomainError):
            GlmmSpec(Family(FamilyKind.BERNOULLI), tiny())


class TestParamLayout:
    def test_pack_unpack(self, gaussian_spec):
        lay = gaussian_spec.layout
        params = ParamState.initial(gaussian_spec, [1.0, 2.0])
        params.u1 = np.arange(lay.q1, dtype=float)
        params.phi = 0.5
        theta = params.pack(lay)
        assert theta.size == lay.q1 + 2 + 1 + 1
        back = ParamState.unpack(lay, theta)
        assert back.phi == pytest.approx(0.5)
        assert np.array_equal(back.u1, params.u1)
        assert lay.log_phi == lay.size - 1

    def test_index_sets_partition(self, poisson_crossed_tiny):
        lay = poisson_crossed_tiny.layout
        for include_beta in (False, True):
            both = np.concatenate(
                [
                    lay.random_index(include_beta),
                    lay.nonrandom_index(include_beta),
                ]
            )
            assert np.array_equal(both, np.arange(lay.size))

    def test_wrong_vector_length(self, poisson_single):
        with pytest.raises(DimensionError):
            ParamState.unpack(poisson_single.layout, np.zeros(3))


class TestHLoglik:
    def test_hand_computed_value(self):
        spec = GlmmSpec(Family(FamilyKind.POISSON), tiny())
        params = ParamState(
            beta=np.array([0.1]),
            u1=np.array([0.2, -0.3]),
            u2=np.zeros(0),
            log_sd=np.array([math.log(0.5)]),
        )
        eta = np.array([0.3, 0.3, -0.2, -0.2])
        expected = np.sum(stats.poisson.logpmf([0, 1, 2, 1], np.exp(eta)))
        expected += np.sum(stats.norm.logpdf([0.2, -0.3], 0.0, 0.5))
        assert h_loglik(spec, params) == pytest.approx(expected, rel=1e-14)
        assert np.allclose(linear_predictor(spec, params), eta)

    def test_thread_count_does_not_change_value(self, poisson_crossed_tiny):
        spec = poisson_crossed_tiny
        rng = np.random.default_rng(1)
        theta = rng.normal(0.0, 0.2, spec.layout.size)
        params = ParamState.unpack(spec.layout, theta)
        assert h_loglik(spec, params, threads=1) == h_loglik(
            spec, params, threads=4
        )

    def test_non_finite_contribution(self, poisson_single):
        params = ParamState.initial(poisson_single, [800.0, 0.0])
        with pytest.raises(NonFiniteLikelihoodError):
            h_loglik(poisson_single, params)

    def test_glm_loglik_ignores_random_effects(self, poisson_single):
        params = ParamState.initial(poisson_single, [0.1, -0.2])
        d = poisson_single.dataset
        eta = d.X @ params.beta
        expected = np.sum(stats.poisson.logpmf(d.y, np.exp(eta)))
        assert glm_loglik(poisson_single, params.beta) == pytest.approx(
            expected, rel=1e-12
        )
