import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dgap.data import DomainShiftSpec, generate_dataset
from dgap.models import ModelSpec, init_model

settings.register_profile("dgap", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dgap")


def small_spec(**kw):
    base = dict(image_size=16, n_train=6, n_id_test=3, n_ood_test=4, n_unlabeled=6)
    base.update(kw)
    return DomainShiftSpec(**base)


@pytest.fixture(scope="session")
def small_bundle():
    return generate_dataset(small_spec(), (0, 1, 2, 3), (4, 5), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cnn16():
    return init_model(ModelSpec("tiny_cnn", (3, 16, 16), 3, (4, 6)), seed=3)


@pytest.fixture(scope="session")
def default_ablation():
    """The five-arm ablation on the default benchmark, run once per session.

    Returns ``(records, seconds)``; the wall time feeds the runtime criterion.
    """
    from dgap import cli
    from dgap.config import RunConfig
    from dgap.train import ABLATION_ARMS, run_ablation

    cfg = RunConfig()
    t0 = time.perf_counter()
    bundle = cli.bundle_for(cfg)
    records = run_ablation(bundle, cfg.train_config(), cfg.run.ablation_seeds, cfg.model_spec(), ABLATION_ARMS)
    return records, time.perf_counter() - t0
