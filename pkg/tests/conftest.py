import numpy as np
import pytest

from pi2pc.otcompare import CompareContext
from pi2pc.ring import FixedTensor, RingConfig
from pi2pc.sharing import Dealer, LiveSupply, shr
from pi2pc.transport import run_pair


@pytest.fixture
def cfg32():
    return RingConfig(32, 16)


@pytest.fixture
def cfg64():
    return RingConfig(64, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_contexts(seed: int = 0) -> tuple[CompareContext, CompareContext]:
    return (
        CompareContext(0, np.random.default_rng(seed)),
        CompareContext(1, np.random.default_rng(seed + 1)),
    )


def share_of(values, cfg, seed: int = 0, encode_real: bool = False, session: str = "local"):
    """Shares of a raw-word (or real-valued) tensor, plus the plain tensor."""
    if encode_real:
        t = FixedTensor.from_real(values, cfg)
    else:
        t = FixedTensor.from_ring(np.asarray(values, dtype=np.uint64), cfg)
    s0, s1 = shr(t, np.random.default_rng(seed), session=session)
    return t, s0, s1


def live_supplies(cfg, seed: int = 0):
    return LiveSupply.make_pair(Dealer(cfg, seed))


__all__ = ["make_contexts", "share_of", "live_supplies", "run_pair"]
