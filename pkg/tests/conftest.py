import numpy as np
import pytest

from lewis import ArchConfig, Checkpoint, random_checkpoint


@pytest.fixture
def small_arch() -> ArchConfig:
    return ArchConfig(
        vocab_size=256, hidden_dim=8, num_blocks=2, num_heads=2, mlp_dim=16, max_seq_len=32
    )


@pytest.fixture
def toy_pair(small_arch):
    """A base checkpoint and a perturbed fine-tune of it."""
    base = random_checkpoint(small_arch, seed=11)
    rng = np.random.default_rng(12)
    fine = Checkpoint(
        {n: base[n] + 0.1 * rng.standard_normal(base[n].shape) for n in base.names()},
        dict(base.dtypes),
    )
    return base, fine


def random_fixture_checkpoint(rng: np.random.Generator, max_tensors: int = 5) -> Checkpoint:
    """Small random checkpoint with mixed dtypes, for IO tests."""
    dtypes = ("F32", "F16", "BF16")
    n = int(rng.integers(1, max_tensors + 1))
    tensors, tags = {}, {}
    for i in range(n):
        ndim = int(rng.integers(1, 4))
        shape = tuple(int(s) for s in rng.integers(1, 6, size=ndim))
        tensors[f"t{i}.weight"] = rng.standard_normal(shape)
        tags[f"t{i}.weight"] = dtypes[int(rng.integers(0, 3))]
    return Checkpoint(tensors, tags)
