import numpy as np
import pytest

from adod.network import NetworkSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    # smallest detector that still has all three scales
    return NetworkSpec(
        input_width=64,
        stage_widths=(4, 8, 16, 32, 64),
        blocks_per_stage=(1, 1, 1, 1, 1),
        num_classes=3,
    )
