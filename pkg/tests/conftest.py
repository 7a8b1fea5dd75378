import numpy as np
import pytest

from sknas import data_io as dio
from sknas import latency_model as lm
from sknas import superkernel as skm
from sknas import supernet_builder as snb
from sknas.search_engine import SearchConfig


@pytest.fixture(scope="session")
def tiny_macro() -> snb.MacroConfig:
    """Two searchable layers, second one skip-capable; enumerable space of 20."""
    return snb.MacroConfig(
        stem_channels=4,
        blocks=(snb.BlockSpec(2, 8, 1),),
        head_channels=16,
        num_classes=4,
        input_resolution=16,
    )


@pytest.fixture(scope="session")
def tiny_lut(tiny_macro) -> lm.LatencyTable:
    return lm.synth_lut(tiny_macro, ms_per_mmac=400.0)


@pytest.fixture(scope="session")
def tiny_data(tiny_macro) -> dio.DatasetBundle:
    train = dio.synth_dataset(4, 200, 16, seed=11, split="train")
    evl = dio.synth_dataset(4, 100, 16, seed=11, split="eval")
    return dio.DatasetBundle(train=train, eval=evl)


@pytest.fixture(scope="session")
def tiny_tau(tiny_macro) -> float:
    probe = snb.build_supernet(tiny_macro, skm.IndicatorConfig(), np.random.default_rng([1, 0]))
    return skm.suggest_temperature([layer.sk for layer in probe.layers])


@pytest.fixture(scope="session")
def tiny_search_cfg(tiny_tau) -> SearchConfig:
    return SearchConfig(lam=0.1, epochs=8, batch_size=64, seed=1,
                        indicator=skm.IndicatorConfig(temperature=tiny_tau))


def make_supernet(macro, tau=10.0, seed=1):
    icfg = skm.IndicatorConfig(temperature=tau)
    return snb.build_supernet(macro, icfg, np.random.default_rng([seed, 0]))
