import numpy as np
import pytest

from ssm_core import BufferMode, FusedBuffer, MambaParams, random_params


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    monkeypatch.delenv("SSMDYNLAB_SEED", raising=False)
    monkeypatch.delenv("SSMDYNLAB_OUTPUT", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[BufferMode.TIME_INDEXED, BufferMode.INPUT_PROJECTED], ids=["time", "input"])
def mode(request):
    return request.param


@pytest.fixture
def small_params(mode):
    return random_params(3, 5, mode, seed=7)


@pytest.fixture
def half_decay_params():
    """d=1, A=-1, Delta_bar = ln 2 (a = 0.5), B = C = 1, time-indexed."""

    def build(T=2):
        W = np.tile(np.array([[0.0, 1.0, 1.0]]), (T, 1))
        return MambaParams(
            A_log=np.zeros(1),
            fused=FusedBuffer(BufferMode.TIME_INDEXED, W),
            delta_bias=np.zeros(1),
            T_max=T,
        )

    return build
