"""Task-vector extraction and merged-parameter assembly.

A task vector is the elementwise parameter difference between a fine-tuned
checkpoint and its base; the merged model is the base plus an
alpha-weighted sum of (pruned) task vectors. Both operations are pure and
never mutate their inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, keyset_diff
from .errors import KeysetMismatchError, RecipeError, ShapeMismatchError

MERGE_METHODS = ("task-arithmetic", "ties", "dare-linear", "dare-ties")


@dataclass
class TaskVector:
    """Per-tensor deltas sharing the base checkpoint's keyset."""

    deltas: dict[str, np.ndarray]
    source_model_id: str

    def __post_init__(self):
        self.deltas = {name: self.deltas[name] for name in sorted(self.deltas)}

    def names(self) -> list[str]:
        return list(self.deltas)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.deltas[name]


def _require_same_keys(left_names, right_names, what: str) -> None:
    missing, extra = keyset_diff(left_names, right_names)
    if missing or extra:
        raise KeysetMismatchError(
            f"{what}: tensors only in first: {missing}; only in second: {extra}"
        )


def compute_task_vector(base: Checkpoint, finetuned: Checkpoint, model_id: str) -> TaskVector:
    """delta[t] = finetuned[t] - base[t] for every tensor t."""
    _require_same_keys(base.names(), finetuned.names(), f"task vector for {model_id!r}")
    deltas: dict[str, np.ndarray] = {}
    for name in base.names():
        b, f = base[name], finetuned[name]
        if b.shape != f.shape:
            raise ShapeMismatchError(
                f"tensor {name!r}: base shape {list(b.shape)} vs fine-tuned shape {list(f.shape)}"
            )
        deltas[name] = f - b
    return TaskVector(deltas=deltas, source_model_id=model_id)


def assemble_merged(
    base: Checkpoint,
    pruned_deltas: Sequence[TaskVector],
    alphas: Sequence[float],
    metadata: Mapping[str, str] | None = None,
) -> Checkpoint:
    """merged[t] = base[t] + sum_p alpha_p * delta_p[t]."""
    if len(pruned_deltas) != len(alphas):
        raise RecipeError(f"{len(pruned_deltas)} task vectors but {len(alphas)} alphas")
    for tv in pruned_deltas:
        _require_same_keys(base.names(), tv.names(), f"merge with {tv.source_model_id!r}")
    merged: dict[str, np.ndarray] = {}
    for name in base.names():
        acc = base[name].copy()
        for tv, alpha in zip(pruned_deltas, alphas):
            delta = tv[name]
            if delta.shape != acc.shape:
                raise ShapeMismatchError(
                    f"tensor {name!r}: base shape {list(acc.shape)} vs delta shape {list(delta.shape)}"
                )
            acc += float(alpha) * delta
        merged[name] = acc
    return finalize_checkpoint(merged, base, metadata)


def finalize_checkpoint(
    tensors: dict[str, np.ndarray], base: Checkpoint, metadata: Mapping[str, str] | None
) -> Checkpoint:
    """Build the output checkpoint and reject non-finite results.

    Finiteness is checked after values are snapped to the base's stored
    dtypes, so overflow introduced by the narrowing itself is caught too.
    """
    out = Checkpoint(tensors, dict(base.dtypes), metadata)
    for name, arr in out.tensors.items():
        if not np.all(np.isfinite(arr)):
            raise RecipeError(f"merged tensor {name!r} contains non-finite values")
    return out


@dataclass
class MergeRecipe:
    """Everything a merge run needs: inputs, weights, method, plans, seed.

    `plan_refs` is either a list of sparsity-plan paths (one per model) or
    a single uniform density; None means full density. Relative paths in a
    recipe file resolve against the file's directory.
    """

    base_path: str
    model_paths: list[str]
    alphas: list[float] = field(default_factory=list)
    method: str = "ties"
    plan_refs: list[str] | float | None = None
    seed: int = 0
    naming_scheme: str | None = None

    def __post_init__(self):
        if not self.model_paths:
            raise RecipeError("recipe needs at least one model")
        if not self.alphas:
            self.alphas = [1.0] * len(self.model_paths)
        if len(self.alphas) != len(self.model_paths):
            raise RecipeError(
                f"{len(self.model_paths)} models but {len(self.alphas)} alphas"
            )
        if any(not math.isfinite(a) for a in self.alphas):
            raise RecipeError(f"alphas must be finite, got {self.alphas}")
        if self.method not in MERGE_METHODS:
            raise RecipeError(f"unknown method {self.method!r}; known: {list(MERGE_METHODS)}")
        if isinstance(self.plan_refs, list) and len(self.plan_refs) != len(self.model_paths):
            raise RecipeError(
                f"{len(self.model_paths)} models but {len(self.plan_refs)} plan refs"
            )
        if isinstance(self.plan_refs, (int, float)) and not (0.0 < float(self.plan_refs) <= 1.0):
            raise RecipeError(f"uniform plan density must lie in (0, 1], got {self.plan_refs}")
        self.seed = int(self.seed)

    @classmethod
    def load(cls, path: str | Path) -> "MergeRecipe":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise RecipeError(f"{path}: not valid structured text: {exc}") from exc
        root = path.parent

        def resolve(p: str) -> str:
            return str((root / p) if not Path(p).is_absolute() else Path(p))

        plan_refs = doc.get("plan_refs")
        if isinstance(plan_refs, list):
            plan_refs = [resolve(p) for p in plan_refs]
        try:
            return cls(
                base_path=resolve(doc["base_path"]),
                model_paths=[resolve(p) for p in doc["model_paths"]],
                alphas=[float(a) for a in doc.get("alphas", [])],
                method=doc.get("method", "ties"),
                plan_refs=plan_refs,
                seed=int(doc.get("seed", 0)),
                naming_scheme=doc.get("naming_scheme"),
            )
        except KeyError as exc:
            raise RecipeError(f"{path}: missing required field {exc}") from exc

    def save(self, path: str | Path) -> None:
        doc = {
            "base_path": self.base_path,
            "model_paths": self.model_paths,
            "alphas": self.alphas,
            "method": self.method,
            "plan_refs": self.plan_refs,
            "seed": self.seed,
        }
        if self.naming_scheme is not None:
            doc["naming_scheme"] = self.naming_scheme
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
