"""Task-vector pruning: magnitude trimming and random drop-with-rescale.

Both operate per tensor at a keep-density in (0, 1]. Trimming keeps the
k = ceil(density * n) largest-magnitude entries (ties broken toward the
lower flat index) and zeroes the rest; dropping keeps each entry
independently with probability `density` and rescales survivors by
1/density so the expectation is unchanged.

Randomness is counter-based: each tensor gets its own Philox stream keyed
by (seed, 64-bit hash of tensor name), and the counter position is the
flat element index. Results therefore never depend on the order tensors
are processed in.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np

from .importance import SparsityPlan
from .roles import TensorRole
from .task_vectors import TaskVector

_MASK64 = (1 << 64) - 1


def name_hash64(name: str) -> int:
    """Stable 64-bit hash of a tensor name (process-independent)."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def mix_seed(seed: int, label: str) -> int:
    """Derive a sub-seed from (seed, label); used for per-model streams."""
    h = hashlib.blake2b(digest_size=8)
    h.update((int(seed) & _MASK64).to_bytes(8, "little"))
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def _stream(seed: int, name: str) -> np.random.Generator:
    key = ((int(seed) & _MASK64) << 64) | name_hash64(name)
    return np.random.Generator(np.random.Philox(key=key))


def _check_density(density: float) -> float:
    density = float(density)
    if not (0.0 < density <= 1.0) or math.isnan(density):
        raise ValueError(f"density must lie in (0, 1], got {density}")
    return density


def trim_count(density: float, n: int) -> int:
    """Number of entries kept at `density` on an n-element tensor."""
    return min(n, math.ceil(density * n))


def magnitude_trim(values: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * n) largest |entries|, zero the rest.

    Kept entries are copied bit-exactly; ties in magnitude keep the lower
    flat index first.
    """
    density = _check_density(density)
    flat = np.asarray(values).ravel()
    k = trim_count(density, flat.size)
    if k == flat.size:
        return np.array(values, copy=True)
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(np.asarray(values).shape)


def random_drop_rescale(
    values: np.ndarray, density: float, seed: int, name: str = ""
) -> np.ndarray:
    """Independently keep entries with probability `density`, rescale by 1/density.

    Deterministic for fixed (values, density, seed, name); density 1.0 is
    the exact identity.
    """
    density = _check_density(density)
    arr = np.asarray(values)
    if density == 1.0:
        return np.array(arr, copy=True)
    uniforms = _stream(seed, name).random(arr.size)
    keep = (uniforms < density).reshape(arr.shape)
    out = np.zeros_like(arr)
    out[keep] = arr[keep] / density
    return out


def apply_plan(
    tv: TaskVector,
    plan: SparsityPlan,
    mode: str,
    roles: Callable[[str], TensorRole],
    seed: int = 0,
) -> TaskVector:
    """Prune every tensor of a task vector at its plan density.

    `mode` selects the pruning function: "magnitude" trims, "random" drops
    and rescales. Block tensors use their block's density (role overrides
    win when the plan carries them); everything else uses the default.
    """
    if mode not in ("magnitude", "random"):
        raise ValueError(f"mode must be 'magnitude' or 'random', got {mode!r}")
    pruned: dict[str, np.ndarray] = {}
    for name, delta in tv.deltas.items():
        density = plan.density_for(roles(name), name)
        if mode == "magnitude":
            pruned[name] = magnitude_trim(delta, density)
        else:
            pruned[name] = random_drop_rescale(delta, density, seed, name)
    return TaskVector(deltas=pruned, source_model_id=tv.source_model_id)


def effective_mean_density(
    plan: SparsityPlan, names: list[str], roles: Callable[[str], TensorRole]
) -> float:
    """Mean over tensors of the density the plan assigns them."""
    if not names:
        return 0.0
    return float(np.mean([plan.density_for(roles(n), n) for n in names]))
