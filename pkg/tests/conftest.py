import pytest

from satfedsim.domain import ExperimentConfig, validate_config


def make_config(**overrides) -> ExperimentConfig:
    """Validated config with small-run-friendly defaults for tests."""
    return validate_config(ExperimentConfig(**overrides))


@pytest.fixture(scope="session")
def tiny_run():
    """A short 8-client run shared by harness-level tests."""
    from satfedsim import harness
    cfg = make_config(num_clients=8, num_clusters=2, rounds=6,
                      samples_per_class=150, seed=11)
    return cfg, harness.run_simulation(cfg)
