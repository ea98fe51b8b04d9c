import pytest

from most import engine as E
from most.config import ExperimentConfig

TINY = dict(
    image_size=16,
    acceleration=4,
    center_columns=2,
    n_recon=16,
    n_downstream=16,
    n_downstream_pretrain=16,
    cascades=1,
    batch_size=2,
    pretrain_epochs=1,
    downstream_epochs=1,
    finetune_epochs=1,
    fisher_samples=3,
    seeds=(0,),
    precision="float64",
)


def tiny_config(**changes) -> ExperimentConfig:
    return ExperimentConfig(**{**TINY, **changes})


@pytest.fixture(scope="session")
def tiny_setup():
    cfg = tiny_config()
    return cfg, E.prepare(cfg, 0)
