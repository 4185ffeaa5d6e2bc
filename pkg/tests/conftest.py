import numpy as np
import pytest

from biased_qkd.configuration import RunConfig, parse_config

SMALL_CONFIG = """\
source:
  p_bx: 0.054
  p_bz: 0.012
alice:
  q: 0.8
bob:
  q: 0.8
session:
  session_id: small
  n_rounds: 20000
  source_seed: 7
  protocol_seed: 11
  announce_block: 5000
  timeout: 30
output:
  qber_window: 5000
"""


@pytest.fixture
def small_config_text() -> str:
    return SMALL_CONFIG


@pytest.fixture(scope="session")
def small_run() -> RunConfig:
    return parse_config(SMALL_CONFIG)


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def noisy_pair(rng: np.random.Generator, n: int, qber: float) -> tuple[np.ndarray, np.ndarray]:
    """Alice's random key and Bob's copy with independent bit flips."""
    key_a = rng.integers(0, 2, n, dtype=np.uint8)
    key_b = key_a ^ (rng.random(n) < qber).astype(np.uint8)
    return key_a, key_b
