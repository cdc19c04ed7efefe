import numpy as np
import pytest

from goalkeep import HeatmapPredictor, PredictorConfig, Sample

D_V, D_S, D_E = 4, 12, 8


def rand_sample(rng, task_id=0, goal=None, d_v=D_V, d_s=D_S, d_e=D_E):
    """A random but well-formed sample with its goal inside the default grid."""
    if goal is None:
        goal = rng.uniform(-30.0, 30.0, 2)
    return Sample(
        dynamic=rng.normal(0.0, 0.5, (d_v, d_s)),
        static=rng.normal(0.0, 0.5, d_e),
        goal=np.asarray(goal, dtype=np.float64),
        speed=float(rng.uniform(0.5, 10.0)),
        task_id=task_id,
    )


@pytest.fixture
def predictor():
    return HeatmapPredictor(PredictorConfig(), d_v=D_V, d_s=D_S, d_e=D_E)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
