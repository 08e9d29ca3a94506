import numpy as np
import pytest
import torch

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_bench():
    from daml.data import make_benchmark
    return make_benchmark(n_ids=6, per_id=4, seed=3)


@pytest.fixture(scope="session")
def desk_pretrained():
    """Benchmark seed 0 with both encoders pretrained on its source split."""
    from daml.data import make_benchmark
    from daml.experiments import benchmark_train_config, desk_hyperparams
    from daml.training import pretrain_pair
    bench = make_benchmark(20, 8, seed=0)
    config = benchmark_train_config(0)
    hp = desk_hyperparams()
    return bench, config, hp, pretrain_pair(bench["source"], config, hp)
