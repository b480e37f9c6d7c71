import numpy as np
import pytest

from app.config import get_settings
from app.engine.family import Family
from app.engine.model import Dataset, GlmmSpec
from app.models.enums import FamilyKind


def make_dataset(
    rng: np.random.Generator,
    kind: FamilyKind,
    n: int,
    q1: int,
    q2: int = 0,
    beta=(-0.5, 0.3),
    sigma=(0.8, 0.5),
    phi: float = 1.0,
) -> Dataset:
    """Random-intercept data with an intercept and one N(0,1) covariate."""
    beta = np.asarray(beta, dtype=np.float64)
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])[:, : beta.size]
    g1 = np.arange(n) % q1
    eta = X @ beta + rng.normal(0.0, sigma[0], q1)[g1]
    g2 = None
    if q2:
        g2 = rng.integers(0, q2, n)
        g2[:q2] = np.arange(q2)
        eta = eta + rng.normal(0.0, sigma[1], q2)[g2]
    if kind is FamilyKind.POISSON:
        y = rng.poisson(np.exp(eta)).astype(float)
    elif kind is FamilyKind.BERNOULLI:
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    else:
        y = eta + rng.normal(0.0, np.sqrt(phi), n)
    return Dataset(
        y=y,
        offset=np.zeros(n),
        X=X,
        group1=g1.astype(np.int64),
        q1=q1,
        group2=None if g2 is None else g2.astype(np.int64),
        q2=q2,
    )


def make_spec(kind: FamilyKind, seed: int = 0, **kwargs) -> GlmmSpec:
    rng = np.random.default_rng(seed)
    return GlmmSpec(Family(kind), make_dataset(rng, kind, **kwargs))


@pytest.fixture
def poisson_single() -> GlmmSpec:
    """5 groups, 20 observations."""
    return make_spec(FamilyKind.POISSON, seed=11, n=20, q1=5)


@pytest.fixture
def bernoulli_single() -> GlmmSpec:
    return make_spec(FamilyKind.BERNOULLI, seed=5, n=60, q1=6, beta=(0.2,))


@pytest.fixture
def poisson_crossed_tiny() -> GlmmSpec:
    """q1 + q2 = 5, small enough for the tensor-grid oracle."""
    return make_spec(FamilyKind.POISSON, seed=3, n=24, q1=3, q2=2)


@pytest.fixture
def gaussian_spec() -> GlmmSpec:
    return make_spec(
        FamilyKind.GAUSSIAN, seed=2, n=40, q1=8, beta=(1.0, -0.4), phi=0.6
    )


@pytest.fixture
def checkpoint_db(tmp_path, monkeypatch):
    path = tmp_path / "checkpoints.db"
    monkeypatch.setenv("HLIK_CHECKPOINT_DB", str(path))
    get_settings.cache_clear()
    yield path
    get_settings.cache_clear()


@pytest.fixture
def poisson_rich() -> GlmmSpec:
    """5 groups, 20 observations, large counts; σ̂ well away from 0."""
    return make_spec(
        FamilyKind.POISSON, seed=11, n=20, q1=5, beta=(4.0,), sigma=(0.8,)
    )
