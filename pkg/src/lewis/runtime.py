"""Desk-scale activation capture: a minimal deterministic decoder runtime.

The architecture is the smallest pre-norm decoder that exposes the
Q/K/V/O/MLP weight roles: token embedding, then per block [RMS norm,
causal multi-head attention, residual, RMS norm, two-matrix GELU MLP,
residual], then a final RMS norm and an untied output head. Tokenization
is byte-level (one token per byte, vocab 256), so no external tokenizer is
involved. All arithmetic runs in float64 and is bitwise deterministic.

Activation capture returns, per block, the post-residual block output as a
(tokens, hidden) matrix; profiles reduce those to one scalar per block
under a recorded norm convention so profiles from different conventions
can never be compared silently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .checkpoint import Checkpoint
from .errors import ArchError
from .importance import NORM_CONVENTIONS, ActivationProfile

_RMS_EPS = 1e-6


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the toy decoder; vocab defaults to byte-level 256."""

    vocab_size: int = 256
    hidden_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    mlp_dim: int = 64
    max_seq_len: int = 128
    naming_scheme: str = "toy"

    def __post_init__(self):
        fields = ("vocab_size", "hidden_dim", "num_blocks", "num_heads", "mlp_dim", "max_seq_len")
        for name in fields:
            if getattr(self, name) <= 0:
                raise ArchError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads != 0:
            raise ArchError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )

    @classmethod
    def load(cls, path: str | Path) -> "ArchConfig":
        return cls(**json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


def tensor_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Expected tensor names and shapes for a checkpoint of this architecture."""
    d, v, m = arch.hidden_dim, arch.vocab_size, arch.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (v, d)}
    for i in range(arch.num_blocks):
        shapes[f"blocks.{i}.attn_norm.weight"] = (d,)
        shapes[f"blocks.{i}.attn.wq.weight"] = (d, d)
        shapes[f"blocks.{i}.attn.wk.weight"] = (d, d)
        shapes[f"blocks.{i}.attn.wv.weight"] = (d, d)
        shapes[f"blocks.{i}.attn.wo.weight"] = (d, d)
        shapes[f"blocks.{i}.mlp_norm.weight"] = (d,)
        shapes[f"blocks.{i}.mlp.up.weight"] = (m, d)
        shapes[f"blocks.{i}.mlp.down.weight"] = (d, m)
    shapes["final_norm.weight"] = (d,)
    shapes["head.weight"] = (v, d)
    return shapes


def zero_checkpoint(arch: ArchConfig) -> Checkpoint:
    return Checkpoint({name: np.zeros(shape) for name, shape in tensor_shapes(arch).items()})


def random_checkpoint(arch: ArchConfig, seed: int, scale: float = 0.05) -> Checkpoint:
    """Random toy model; norm gains start at 1, everything else at N(0, scale)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(arch).items():
        noise = scale * rng.standard_normal(shape)
        tensors[name] = 1.0 + noise if name.endswith("norm.weight") else noise
    return Checkpoint(tensors)


# --------------------------------------------------------------------------- #
# tokens and calibration data
# --------------------------------------------------------------------------- #

def tokenize(text: str | bytes, max_seq_len: int | None = None) -> list[int]:
    """Byte-level tokens (one per byte), truncated to max_seq_len."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if len(data) == 0:
        raise ValueError("cannot tokenize empty input")
    if max_seq_len is not None:
        data = data[:max_seq_len]
    return list(data)


def detokenize(tokens: list[int]) -> bytes:
    return bytes(tokens)


@dataclass
class CalibrationSet:
    """Token-id sequences the models are profiled on."""

    samples: list[list[int]]
    source: str = ""

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("calibration set must contain at least one sample")
        for i, sample in enumerate(self.samples):
            if len(sample) == 0:
                raise ValueError(f"calibration sample {i} is empty")

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_file(cls, path: str | Path, max_seq_len: int | None = None) -> "CalibrationSet":
        """Line-delimited records, each {"text": str} or {"tokens": [ints]}."""
        samples: list[list[int]] = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "tokens" in record:
                tokens = [int(t) for t in record["tokens"]]
                if max_seq_len is not None:
                    tokens = tokens[:max_seq_len]
                samples.append(tokens)
            elif "text" in record:
                samples.append(tokenize(record["text"], max_seq_len))
            else:
                raise ValueError(f"{path}: record without 'text' or 'tokens': {record}")
        return cls(samples=samples, source=str(path))

    def save(self, path: str | Path) -> None:
        lines = [json.dumps({"tokens": sample}) for sample in self.samples]
        Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- #
# forward pass
# --------------------------------------------------------------------------- #

def _get_weight(ckpt: Checkpoint, name: str, shape: tuple[int, ...]) -> np.ndarray:
    if name not in ckpt:
        raise ArchError(f"checkpoint is missing tensor {name!r}")
    arr = ckpt[name]
    if arr.shape != shape:
        raise ArchError(f"tensor {name!r} has shape {list(arr.shape)}, expected {list(shape)}")
    return arr


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS)
    return x / scale * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_tokens(arch: ArchConfig, tokens: list[int]) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ArchError("token sequence must be a nonempty 1-d list")
    if toks.size > arch.max_seq_len:
        raise ArchError(f"sequence length {toks.size} exceeds max_seq_len {arch.max_seq_len}")
    if toks.min() < 0 or toks.max() >= arch.vocab_size:
        raise ArchError(f"token ids must lie in [0, {arch.vocab_size})")
    return toks


def _block_forward(ckpt: Checkpoint, arch: ArchConfig, i: int, h: np.ndarray) -> np.ndarray:
    d = arch.hidden_dim
    dh = d // arch.num_heads
    T = h.shape[0]
    shapes = {"norm": (d,), "proj": (d, d)}

    x = _rms_norm(h, _get_weight(ckpt, f"blocks.{i}.attn_norm.weight", shapes["norm"]))
    q = x @ _get_weight(ckpt, f"blocks.{i}.attn.wq.weight", shapes["proj"]).T
    k = x @ _get_weight(ckpt, f"blocks.{i}.attn.wk.weight", shapes["proj"]).T
    v = x @ _get_weight(ckpt, f"blocks.{i}.attn.wv.weight", shapes["proj"]).T
    q = q.reshape(T, arch.num_heads, dh)
    k = k.reshape(T, arch.num_heads, dh)
    v = v.reshape(T, arch.num_heads, dh)
    scores = np.einsum("thd,shd->hts", q, k) / np.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))
    scores = np.where(causal[None, :, :], scores, -np.inf)
    attn = np.einsum("hts,shd->thd", _softmax(scores), v).reshape(T, d)
    h = h + attn @ _get_weight(ckpt, f"blocks.{i}.attn.wo.weight", shapes["proj"]).T

    x = _rms_norm(h, _get_weight(ckpt, f"blocks.{i}.mlp_norm.weight", shapes["norm"]))
    up = _gelu(x @ _get_weight(ckpt, f"blocks.{i}.mlp.up.weight", (arch.mlp_dim, d)).T)
    h = h + up @ _get_weight(ckpt, f"blocks.{i}.mlp.down.weight", (d, arch.mlp_dim)).T
    return h


def forward_capture(ckpt: Checkpoint, arch: ArchConfig, tokens: list[int]) -> list[np.ndarray]:
    """Run the decoder and return each block's output, a (tokens, hidden) matrix."""
    toks = _check_tokens(arch, tokens)
    embed = _get_weight(ckpt, "embed.weight", (arch.vocab_size, arch.hidden_dim))
    h = embed[toks]
    captures: list[np.ndarray] = []
    for i in range(arch.num_blocks):
        h = _block_forward(ckpt, arch, i, h)
        captures.append(h.copy())
    return captures


def forward_logits(ckpt: Checkpoint, arch: ArchConfig, tokens: list[int]) -> np.ndarray:
    """Next-token logits at every position, shape (tokens, vocab)."""
    toks = _check_tokens(arch, tokens)
    embed = _get_weight(ckpt, "embed.weight", (arch.vocab_size, arch.hidden_dim))
    h = embed[toks]
    for i in range(arch.num_blocks):
        h = _block_forward(ckpt, arch, i, h)
    h = _rms_norm(h, _get_weight(ckpt, "final_norm.weight", (arch.hidden_dim,)))
    return h @ _get_weight(ckpt, "head.weight", (arch.vocab_size, arch.hidden_dim)).T


# --------------------------------------------------------------------------- #
# profiles and evaluation
# --------------------------------------------------------------------------- #

def activation_norm(block_output: np.ndarray, convention: str = "mean-token-l2") -> float:
    """Scalar summary of one block-output matrix under a norm convention."""
    if convention == "mean-token-l2":
        return float(np.mean(np.linalg.norm(block_output, axis=-1)))
    if convention == "frobenius":
        return float(np.linalg.norm(block_output))
    raise ValueError(f"unknown norm convention {convention!r}; known: {list(NORM_CONVENTIONS)}")


def profile_model(
    ckpt: Checkpoint,
    arch: ArchConfig,
    calib: CalibrationSet,
    convention: str = "mean-token-l2",
    model_id: str = "",
) -> ActivationProfile:
    """Mean activation norm per block over the calibration samples."""
    totals = np.zeros(arch.num_blocks)
    for sample in calib.samples:
        for layer, block_output in enumerate(forward_capture(ckpt, arch, sample)):
            totals[layer] += activation_norm(block_output, convention)
    norms = totals / len(calib.samples)
    return ActivationProfile(
        model_id=model_id,
        layer_norms={layer: float(norms[layer]) for layer in range(arch.num_blocks)},
        num_samples=len(calib.samples),
        norm_convention=convention,
    )


def eval_loss(ckpt: Checkpoint, arch: ArchConfig, calib: CalibrationSet) -> float:
    """Mean next-token cross-entropy over all positions of all samples."""
    total = 0.0
    count = 0
    for i, sample in enumerate(calib.samples):
        if len(sample) < 2:
            raise ValueError(f"calibration sample {i} has {len(sample)} tokens, need >= 2")
        logits = forward_logits(ckpt, arch, sample)[:-1]
        targets = np.asarray(sample[1:], dtype=np.int64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1))
        nll = log_z - shifted[np.arange(targets.size), targets]
        total += float(nll.sum())
        count += targets.size
    return total / count
