import math
from pathlib import Path

import numpy as np
import pytest

from tokendrop.config import PipelineConfig
from tokendrop.fixtures import FixtureSpec
from tokendrop.model import ToyConfig, synthesize_weights
from tokendrop.pipeline import load_model, make_fixtures, run_suite
from tokendrop.prefill import PrefillConfig

DATA = Path(__file__).parent / "data"
# Scaled analogs of 192 / 128 / 64 retained tokens out of 576, on a 64-patch grid.
BUDGETS = tuple(round(64 * b / 576, 1) for b in (192, 128, 64))


@pytest.fixture(scope="session")
def toy():
    return ToyConfig()


@pytest.fixture(scope="session")
def weights(toy):
    return synthesize_weights(toy, 0)


def suite_config(kind, budget=BUDGETS[-1], count=100, **kw):
    return PipelineConfig(fixtures=FixtureSpec(kind=kind, count=count), prefill=PrefillConfig(budget=budget), **kw)


@pytest.fixture(scope="session")
def needle_config():
    return suite_config("needle")


@pytest.fixture(scope="session")
def needle_fixtures(needle_config, weights):
    return make_fixtures(needle_config, weights)


@pytest.fixture(scope="session")
def needle_suite(needle_config, weights, needle_fixtures):
    return run_suite(needle_config, weights, needle_fixtures)


@pytest.fixture(scope="session")
def blocks_config():
    return suite_config("blocks")


@pytest.fixture(scope="session")
def blocks_fixtures(blocks_config, weights):
    return make_fixtures(blocks_config, weights)


@pytest.fixture(scope="session")
def blocks_suites(blocks_config, weights, blocks_fixtures):
    """One calibrated mustdrop run per budget analog."""
    from dataclasses import replace
    return {b: run_suite(replace(blocks_config, prefill=PrefillConfig(budget=b)), weights, blocks_fixtures)
            for b in BUDGETS}

_M64 = (1 << 64) - 1


def splitmix_ref(seed, n):
    """Scalar big-int splitmix64, independent of the vectorised source."""
    s, out = seed, []
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & _M64
        z = ((s ^ (s >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        out.append(z ^ (z >> 31))
    return out
