"""Exception hierarchy for the merge toolkit.

Every failure the library raises on purpose derives from MergeError so
callers (and the CLI) can catch one type. Checkpoint-file problems get
their own subtree with one class per failure mode; messages always name
the offending tensor where one exists.
"""

from __future__ import annotations


class MergeError(Exception):
    """Base class for all toolkit errors."""


class CheckpointError(MergeError):
    """Base class for checkpoint container problems."""


class HeaderLengthError(CheckpointError):
    """The 8-byte header-length prefix is missing or inconsistent with the file."""


class HeaderParseError(CheckpointError):
    """The header bytes are not a valid structured-text tensor table."""


class DataOffsetError(CheckpointError):
    """A tensor's data offsets overlap another tensor or fall outside the file."""


class UnknownDtypeError(CheckpointError):
    """A tensor declares a dtype string the toolkit does not support."""


class InvalidTensorError(CheckpointError):
    """A tensor violates the container invariants (empty shape, zero elements, ...)."""


class KeysetMismatchError(MergeError):
    """Two checkpoints that must share a keyset do not."""


class ShapeMismatchError(MergeError):
    """Same tensor name, different shapes between two checkpoints."""


class ProfileMismatchError(MergeError):
    """Two activation profiles disagree on layer ids or norm convention."""


class PlanError(MergeError):
    """A sparsity plan is invalid or lacks a density some tensor needs."""


class RecipeError(MergeError):
    """A merge recipe is malformed or internally inconsistent."""


class ArchError(MergeError):
    """A checkpoint does not match the architecture it is being run as."""
