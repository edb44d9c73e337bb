import numpy as np
import pytest

from pta.data_synth import generate_dataset, make_modality_specs
from pta.model_core import ModelConfig, PTANetwork


@pytest.fixture(scope="session")
def tiny_dataset():
    specs = make_modality_specs((3, 4), (10.0, 0.0), latent_dim=2, seed=1)
    return generate_dataset(specs, 60, 1, label_dim=2)


@pytest.fixture
def tiny_net(tiny_dataset):
    """Network under 10^3 parameters, jittered away from its structured init."""
    cfg = ModelConfig({s.name: s.obs_dim for s in tiny_dataset.specs}, out_dim=2, d_f=4, d_z=4, enc_hidden=4,
                      head_hidden=4, T=10, n_steps=5)
    net = PTANetwork(cfg)
    p = net.init_params(0)
    p.data += np.random.default_rng(1).normal(0.0, 0.1, p.data.size)
    assert net.n_params <= 1000
    return net, p


@pytest.fixture(scope="session")
def default_dataset():
    from pta.data_synth import dataset_from_config

    return dataset_from_config({})


_acceptance_key = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """List of ``(label, passed, seconds, detail)``; printed in the terminal summary."""
    return request.config.stash.setdefault(_acceptance_key, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_acceptance_key, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, seconds, detail in lines:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  ({seconds:.1f}s)  {detail}")
