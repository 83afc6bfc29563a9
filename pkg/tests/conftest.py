from dataclasses import asdict

import numpy as np
import pytest

from ntkmoe.datasets import gen_cluster_classification
from ntkmoe.experiments import TOY_NOISE, trained_toy
from ntkmoe.nn import MlpSpec, TrainConfig, init_mlp, train_map
from ntkmoe.pipeline import MoeConfig, fit_moe


@pytest.fixture(scope="session")
def toy_net():
    mlp, train, test, _tc = trained_toy(0)
    return mlp, train, test, TOY_NOISE


@pytest.fixture(scope="session")
def toy_train_config():
    return asdict(trained_toy(0)[3])


@pytest.fixture(scope="session")
def toy_moe(toy_net, toy_train_config):
    mlp, train, _test, _noise = toy_net
    return fit_moe(mlp, train, MoeConfig(n_experts=8, boundary_budget=16, seed=0),
                   train_config=toy_train_config)


@pytest.fixture(scope="session")
def classifier():
    train, test, ood = gen_cluster_classification(3, 120, 4.0, seed=0)
    tc = TrainConfig("cross_entropy", 1e-3, 0.1, 200, 16, 0)
    mlp = train_map(init_mlp(MlpSpec((2, 16, 3), "tanh"), 0), train, tc)
    model = fit_moe(mlp, train, MoeConfig(n_experts=3, boundary_budget=8, mll_iterations=0),
                    train_config=asdict(tc))
    return model, train, test, ood


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
