"""Channel-agnostic token lattice, text hashing, and masking plans.

A record becomes a (channel x time-patch) grid. Channels are always laid out
in :class:`ChannelKind` enumeration order, so the storage order of a record's
channel map never influences anything downstream.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import re
import warnings

import numpy as np

from .errors import ConfigError, ContractError
from .signals import ChannelKind, SignalRecord, canonical_kinds, stable_hash

STD_FLOOR = 1e-6
DEFAULT_PATCH_LEN = 50
DEFAULT_MASK_RATIO = 0.75
TEXT_BUCKETS = 4096


@dataclasses.dataclass(frozen=True)
class TokenGrid:
    """Normalized patches of shape (n_channels, n_time_patches, patch_len)."""

    kinds: tuple[ChannelKind, ...]
    patches: np.ndarray
    norm_stats: dict[ChannelKind, tuple[float, float]]
    report: str | None = None

    @property
    def n_channels(self) -> int:
        return len(self.kinds)

    @property
    def n_time_patches(self) -> int:
        return self.patches.shape[1]

    @property
    def patch_len(self) -> int:
        return self.patches.shape[2]

    @property
    def n_tokens(self) -> int:
        return self.n_channels * self.n_time_patches

    @property
    def geometry(self) -> tuple:
        return (self.kinds, self.n_time_patches, self.patch_len)

    def token_kinds(self) -> list[ChannelKind]:
        return [k for k in self.kinds for _ in range(self.n_time_patches)]

    def token_times(self) -> np.ndarray:
        return np.tile(np.arange(self.n_time_patches), self.n_channels)

    def tokens(self):
        """Yield ``(channel_kind, time_index, patch)`` in canonical order."""
        for c, kind in enumerate(self.kinds):
            for t in range(self.n_time_patches):
                yield kind, t, self.patches[c, t]

    def flat_patches(self) -> np.ndarray:
        return self.patches.reshape(self.n_tokens, self.patch_len)


def patchify(record: SignalRecord, patch_len: int = DEFAULT_PATCH_LEN) -> TokenGrid:
    if patch_len < 2:
        raise ConfigError(f"patch_len must be >= 2, got {patch_len}")
    if record.length < patch_len:
        raise ContractError(f"record {record.record_id!r} has {record.length} samples, shorter than patch_len {patch_len}")
    n_time = record.length // patch_len
    kinds = canonical_kinds(k for k in record.channels if k is not ChannelKind.TEXT)
    patches = np.empty((len(kinds), n_time, patch_len), dtype=np.float32)
    stats = {}
    for c, kind in enumerate(kinds):
        kept = record.channels[kind][: n_time * patch_len].astype(np.float64)
        mu = float(kept.mean())
        sd = max(float(kept.std()), STD_FLOOR)
        patches[c] = ((kept - mu) / sd).reshape(n_time, patch_len)
        stats[kind] = (mu, sd)
    return TokenGrid(kinds, patches, stats, record.report)


_WORD = re.compile(r"[^0-9a-z]+")


def text_buckets(report: str | None, n_buckets: int = TEXT_BUCKETS, max_tokens: int | None = None) -> np.ndarray:
    """Lowercased words hashed into ``n_buckets`` buckets, in reading order."""
    if not report:
        return np.zeros(0, dtype=np.int64)
    words = [w for w in _WORD.split(report.lower()) if w]
    ids = np.array([stable_hash(w) % n_buckets for w in words], dtype=np.int64)
    return ids if max_tokens is None else ids[:max_tokens]


class MaskMode(str, enum.Enum):
    TEMPORAL = "TEMPORAL"
    CHANNEL = "CHANNEL"
    MIXED = "MIXED"


@dataclasses.dataclass(frozen=True)
class MaskPlan:
    """Masking assignment over the signal tokens of one grid (canonical order).

    Text tokens are never part of a plan and are never masked.
    """

    masked: np.ndarray
    mode: MaskMode
    ratio: float
    rng_seed: int
    fell_back: bool = False

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode.value,
                "ratio": self.ratio,
                "seed": self.rng_seed,
                "masked": [int(i) for i in self.masked_indices],
                "n_tokens": int(self.masked.size),
                "fell_back": self.fell_back,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        d = json.loads(text)
        masked = np.zeros(d["n_tokens"], dtype=bool)
        masked[d["masked"]] = True
        return cls(masked, MaskMode(d["mode"]), d["ratio"], d["seed"], d.get("fell_back", False))


def mask_count(n_signal: int, ratio: float) -> int:
    return min(max(math.floor(ratio * n_signal), 1), n_signal - 1)


def sample_mask(grid: TokenGrid, mode: MaskMode | str = MaskMode.MIXED, ratio: float = DEFAULT_MASK_RATIO, seed: int = 0) -> MaskPlan:
    mode = MaskMode(mode)
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    C, T = grid.n_channels, grid.n_time_patches
    n = C * T
    if n < 2:
        raise ContractError("masking needs at least two signal tokens")
    k = mask_count(n, ratio)
    rng = np.random.default_rng(seed)
    fell_back = False
    if mode is MaskMode.CHANNEL and C == 1:
        warnings.warn("CHANNEL masking on a single-channel grid falls back to TEMPORAL", stacklevel=2)
        fell_back = True
    layout = np.arange(n).reshape(C, T)
    if mode is MaskMode.MIXED:
        masked = rng.random(n) < ratio
        have = int(masked.sum())
        if have > k:
            masked[rng.choice(np.flatnonzero(masked), have - k, replace=False)] = False
        elif have < k:
            masked[rng.choice(np.flatnonzero(~masked), k - have, replace=False)] = True
    else:
        groups = layout if (mode is MaskMode.CHANNEL and not fell_back) else layout.T
        masked = np.zeros(n, dtype=bool)
        count = 0
        for g in rng.permutation(len(groups)):
            members = groups[g]
            if count + len(members) <= k:
                masked[members] = True
                count += len(members)
            else:
                masked[rng.choice(members, k - count, replace=False)] = True
                count = k
            if count >= k:
                break
    return MaskPlan(masked, mode, float(ratio), int(seed), fell_back)
