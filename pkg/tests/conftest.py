import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def synth_scale_config(**overrides):
    """Engine config for raw-cosine synthetic streams.

    The default temperature bounds target backbone-scaled similarities; on
    raw unit-vector cosines the softmax needs an order of magnitude more
    sharpening before responsibilities become decisive, so the synthetic
    harness widens the bounds, starts warmer, and lets the calibration
    temperature mirror the prediction temperature.
    """
    from headstream import EngineConfig, TempConfig

    temp = overrides.pop(
        "temp",
        TempConfig(
            tau_min=0.5, tau_max=40.0, tau_init=10.0, beta=0.9,
            cal_mode="mirror_pred",
        ),
    )
    return EngineConfig(temp=temp, **overrides)


@pytest.fixture
def random_anchors(rng):
    def make(n_classes=10, dim=16):
        from headstream import Anchors

        return Anchors(unit_rows(rng.normal(size=(n_classes, dim))))

    return make
