"""Signal records, the wavebundle file format, and a synthetic ECG/PPG/ABP generator."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import struct
import zlib
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ContractError,
    DuplicateChannelError,
    MissingChannelError,
    ParseError,
    TruncatedDataError,
    VersionMismatchError,
    VocabularyError,
)


class ChannelKind(enum.Enum):
    I = "I"
    II = "II"
    III = "III"
    aVR = "aVR"
    aVL = "aVL"
    aVF = "aVF"
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"
    V4 = "V4"
    V5 = "V5"
    V6 = "V6"
    PPG = "PPG"
    ABP = "ABP"
    TEXT = "TEXT"

    @property
    def order(self) -> int:
        return _KIND_ORDER[self]

    @classmethod
    def parse(cls, name: str) -> "ChannelKind":
        if isinstance(name, ChannelKind):
            return name
        try:
            return cls(name)
        except ValueError:
            raise VocabularyError(f"unknown channel kind {name!r}") from None


_KIND_ORDER = {k: i for i, k in enumerate(ChannelKind)}

ECG_LEADS = tuple(ChannelKind)[:12]
SIGNAL_KINDS = tuple(k for k in ChannelKind if k is not ChannelKind.TEXT)
PRETRAIN_KINDS = ECG_LEADS + (ChannelKind.PPG,)

LEAD_CONFIGS = {
    "12-lead": ECG_LEADS,
    "6-lead": (ChannelKind.I, ChannelKind.II, ChannelKind.III, ChannelKind.aVL, ChannelKind.aVR, ChannelKind.aVF),
    "2-lead": (ChannelKind.II, ChannelKind.V5),
    "1-lead": (ChannelKind.II,),
}


def canonical_kinds(kinds: Iterable[ChannelKind]) -> tuple[ChannelKind, ...]:
    return tuple(sorted(kinds, key=lambda k: k.order))


def parse_channel_list(text: str) -> tuple[ChannelKind, ...]:
    """Parse a comma separated list such as ``"II,V5"``."""
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if not tokens:
        raise VocabularyError("empty channel list")
    return tuple(ChannelKind.parse(t) for t in tokens)


@dataclasses.dataclass
class SignalRecord:
    record_id: str
    sample_rate_hz: float
    channels: dict[ChannelKind, np.ndarray]
    report: str | None = None
    labels: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ContractError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        chans = {}
        for kind, series in self.channels.items():
            kind = ChannelKind.parse(kind)
            if kind in chans:
                raise DuplicateChannelError(f"duplicate channel {kind.value!r}")
            chans[kind] = np.ascontiguousarray(series, dtype=np.float32)
        if not any(k is not ChannelKind.TEXT for k in chans):
            raise ContractError("record needs at least one non-TEXT channel")
        lengths = {s.shape for s in chans.values()}
        if len(lengths) != 1 or next(iter(lengths))[0] < 1 or len(next(iter(lengths))) != 1:
            raise ContractError(f"channel series must be 1-D with identical length >= 1, got {sorted(lengths)}")
        self.channels = chans

    @property
    def length(self) -> int:
        return next(iter(self.channels.values())).shape[0]

    @property
    def kinds(self) -> tuple[ChannelKind, ...]:
        return tuple(self.channels)

    def with_channels(self, channels: Mapping[ChannelKind, np.ndarray], **changes) -> "SignalRecord":
        return dataclasses.replace(self, channels=dict(channels), labels=dict(self.labels), **changes)

    def equals(self, other: "SignalRecord") -> bool:
        """Field-by-field equality including channel order and exact sample bits."""
        if (self.record_id, self.sample_rate_hz, self.report, self.labels) != (
            other.record_id, other.sample_rate_hz, other.report, other.labels
        ):
            return False
        if list(self.channels) != list(other.channels):
            return False
        return all(self.channels[k].tobytes() == other.channels[k].tobytes() for k in self.channels)


def subset_channels(record: SignalRecord, kinds: Iterable[ChannelKind]) -> SignalRecord:
    """Restrict ``record`` to ``kinds``; storage order of the record is kept."""
    wanted = {ChannelKind.parse(k) for k in kinds}
    missing = wanted - set(record.channels)
    if missing:
        names = ", ".join(sorted(k.value for k in missing))
        raise MissingChannelError(f"record {record.record_id!r} lacks channel(s): {names}")
    return record.with_channels({k: v for k, v in record.channels.items() if k in wanted})


# ---------------------------------------------------------------- wavebundle format

WAVEBUNDLE_MAGIC = b"CWB1"
_U32 = struct.Struct("<I")


def dump_record(record: SignalRecord) -> bytes:
    table, offset = [], 0
    for kind, series in record.channels.items():
        table.append([kind.value, offset, int(series.shape[0])])
        offset += int(series.shape[0])
    header = {
        "record_id": record.record_id,
        "sample_rate_hz": record.sample_rate_hz,
        "channels": table,
        "report": record.report,
        "labels": record.labels,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    samples = b"".join(s.astype("<f4").tobytes() for s in record.channels.values())
    return WAVEBUNDLE_MAGIC + _U32.pack(len(blob)) + blob + samples


def parse_record(buf: bytes) -> SignalRecord:
    if len(buf) < 8:
        raise TruncatedDataError("wavebundle shorter than its fixed preamble")
    magic = buf[:4]
    if magic != WAVEBUNDLE_MAGIC:
        if magic[:3] == WAVEBUNDLE_MAGIC[:3]:
            raise VersionMismatchError(f"unsupported wavebundle version {magic[3:]!r}")
        raise BadMagicError(f"not a wavebundle (magic {magic!r})")
    (hlen,) = _U32.unpack_from(buf, 4)
    if len(buf) < 8 + hlen:
        raise TruncatedDataError("wavebundle header truncated")
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad wavebundle header: {exc}") from exc
    body = memoryview(buf)[8 + hlen:]
    channels: dict[ChannelKind, np.ndarray] = {}
    total = 0
    for name, offset, length in header["channels"]:
        kind = ChannelKind.parse(name)
        if kind in channels:
            raise DuplicateChannelError(f"duplicate channel {name!r} in wavebundle")
        end = (offset + length) * 4
        if end > len(body):
            raise TruncatedDataError(
                f"channel {name!r} declares {length} samples at offset {offset}, buffer holds {len(body) // 4}"
            )
        channels[kind] = np.frombuffer(body[offset * 4:end], dtype="<f4").astype(np.float32)
        total = max(total, offset + length)
    if len(body) != total * 4:
        raise TruncatedDataError(f"sample buffer has {len(body)} bytes, header implies {total * 4}")
    return SignalRecord(
        record_id=header["record_id"],
        sample_rate_hz=header["sample_rate_hz"],
        channels=channels,
        report=header.get("report"),
        labels=header.get("labels") or {},
    )


def save_record(record: SignalRecord, path) -> None:
    Path(path).write_bytes(dump_record(record))


def load_record(path) -> SignalRecord:
    return parse_record(Path(path).read_bytes())


# ---------------------------------------------------------------- synthetic generator


class Condition(str, enum.Enum):
    NORMAL = "NORMAL"
    AF = "AF"


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings.

    ``ptt_s`` is the R-peak to pulse delay range (pulse transit time);
    the blood pressure of a record falls as its transit time rises.
    ``af_onset_s`` switches an AF record to irregular rhythm only after that
    time (None: AF throughout).
    """

    heart_rate_bpm: tuple[float, float] = (60.0, 90.0)
    noise_std: float = 0.02
    duration_s: float = 10.0
    sample_rate_hz: float = 100.0
    rng_seed: int = 0
    condition: Condition = Condition.NORMAL
    ptt_s: tuple[float, float] = (0.2, 0.2)
    af_onset_s: float | None = None
    with_report: bool = True

    def __post_init__(self):
        lo, hi = self.heart_rate_bpm
        if not 20 <= lo <= hi <= 250:
            raise ConfigError(f"heart_rate_bpm range {self.heart_rate_bpm} is invalid")
        if self.noise_std < 0 or self.sample_rate_hz <= 0 or self.duration_s <= 0:
            raise ConfigError("noise_std must be >= 0; sample_rate_hz and duration_s must be > 0")
        if self.ptt_s[0] > self.ptt_s[1] or self.ptt_s[0] < 0:
            raise ConfigError(f"ptt_s range {self.ptt_s} is invalid")
        object.__setattr__(self, "condition", Condition(self.condition))

    def replace(self, **changes) -> "SyntheticConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["condition"] = self.condition.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticConfig":
        d = dict(d)
        for key in ("heart_rate_bpm", "ptt_s"):
            if key in d:
                val = d[key]
                d[key] = (float(val), float(val)) if np.isscalar(val) else tuple(float(v) for v in val)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)


# (fraction of the RR interval, amplitude, width in seconds) for P, Q, R, S, T
_BUMPS_A = ((0.30, 0.15, 0.025), (0.44, -0.12, 0.010), (0.47, 1.00, 0.012), (0.50, -0.25, 0.012), (0.78, 0.30, 0.040))
_BUMPS_B = ((0.30, 0.05, 0.025), (0.44, -0.05, 0.010), (0.475, 0.55, 0.014), (0.51, -0.45, 0.014), (0.80, 0.12, 0.045))
_R_FRACTION = 0.47

# per-lead weights on the two latent bump trains; lead II is the pure first train
_LEAD_MIX = {
    ChannelKind.I: (0.5, 0.87),
    ChannelKind.II: (1.0, 0.0),
    ChannelKind.III: (0.5, -0.87),
    ChannelKind.aVR: (-0.75, -0.43),
    ChannelKind.aVL: (0.0, 0.87),
    ChannelKind.aVF: (0.75, -0.43),
    ChannelKind.V1: (-0.3, -0.9),
    ChannelKind.V2: (0.1, -1.1),
    ChannelKind.V3: (0.5, -0.6),
    ChannelKind.V4: (0.9, -0.1),
    ChannelKind.V5: (0.9, 0.4),
    ChannelKind.V6: (0.7, 0.6),
}

_NORMAL_RR_JITTER = 0.01
_AF_RR_JITTER = 0.45
_AF_MIN_CV = 0.2
_AF_MAX_DRAWS = 50
_MIN_RR_S = 0.3


@dataclasses.dataclass(frozen=True)
class _Rhythm:
    beat_starts: np.ndarray
    rr: np.ndarray
    has_p: np.ndarray
    heart_rate: float
    ptt: float

    @property
    def r_times(self) -> np.ndarray:
        return self.beat_starts + _R_FRACTION * self.rr


def _rhythm(config: SyntheticConfig) -> _Rhythm:
    rng = np.random.default_rng([config.rng_seed, 0])
    hr = float(rng.uniform(*config.heart_rate_bpm))
    ptt = float(rng.uniform(*config.ptt_s))
    base = 60.0 / hr
    if base * _R_FRACTION >= config.duration_s:
        raise ConfigError(f"duration {config.duration_s}s is too short for one beat at {hr:.1f} bpm")
    af = config.condition is Condition.AF
    onset = config.duration_s if not af else (config.af_onset_s or 0.0)
    starts, rrs = [], []
    t = 0.0
    while t < min(onset, config.duration_s):
        rr = base * (1.0 + rng.normal(0.0, _NORMAL_RR_JITTER))
        starts.append(t)
        rrs.append(rr)
        t += rr
    n_regular = len(starts)
    if t < config.duration_s:
        # redraw until the irregular segment is measurably irregular
        for _ in range(_AF_MAX_DRAWS):
            seg_starts, seg_rr, u = [], [], t
            while u < config.duration_s:
                rr = max(base * (1.0 + rng.uniform(-_AF_RR_JITTER, _AF_RR_JITTER)), _MIN_RR_S)
                seg_starts.append(u)
                seg_rr.append(rr)
                u += rr
            r_times = np.array(seg_starts) + _R_FRACTION * np.array(seg_rr)
            if len(r_times) < 4 or rr_coefficient_of_variation(r_times[r_times < config.duration_s]) >= _AF_MIN_CV:
                break
        starts += seg_starts
        rrs += seg_rr
    has_p = np.arange(len(starts)) < n_regular
    return _Rhythm(np.array(starts), np.array(rrs), has_p, hr, ptt)


def _bump_train(t: np.ndarray, rhythm: _Rhythm, bumps) -> np.ndarray:
    out = np.zeros_like(t)
    for i, (frac, amp, width) in enumerate(bumps):
        centers = rhythm.beat_starts + frac * rhythm.rr
        amps = np.where(rhythm.has_p, amp, 0.0) if i == 0 else np.full(centers.shape, amp)
        for c, a in zip(centers, amps):
            if a == 0.0:
                continue
            lo = np.searchsorted(t, c - 5 * width)
            hi = np.searchsorted(t, c + 5 * width)
            out[lo:hi] += a * np.exp(-0.5 * ((t[lo:hi] - c) / width) ** 2)
    return out


def _pulse_train(t: np.ndarray, rhythm: _Rhythm) -> np.ndarray:
    out = np.zeros_like(t)
    for r in rhythm.r_times:
        for offset, amp, width in ((0.0, 1.0, 0.04), (0.25, 0.25, 0.08)):
            c = r + rhythm.ptt + offset
            lo = np.searchsorted(t, c - 5 * width)
            hi = np.searchsorted(t, c + 5 * width)
            out[lo:hi] += amp * np.exp(-0.5 * ((t[lo:hi] - c) / width) ** 2)
    return out


def _channel_noise(config: SyntheticConfig, kind: ChannelKind, n: int) -> np.ndarray:
    if config.noise_std == 0:
        return np.zeros(n)
    rng = np.random.default_rng([config.rng_seed, 1, kind.order])
    return rng.normal(0.0, config.noise_std, size=n)


def _report(config: SyntheticConfig, rhythm: _Rhythm) -> str | None:
    if not config.with_report:
        return None
    rhythm_name = "atrial fibrillation" if config.condition is Condition.AF else "sinus rhythm"
    return f"{rhythm_name}, rate {int(round(rhythm.heart_rate))}"


def _time_axis(config: SyntheticConfig) -> np.ndarray:
    n = int(round(config.duration_s * config.sample_rate_hz))
    return np.arange(n) / config.sample_rate_hz


def blood_pressure_targets(heart_rate: float, ptt: float) -> tuple[float, float]:
    """Systolic/diastolic levels the generator assigns to a record."""
    sbp = 120.0 + 0.3 * (heart_rate - 75.0) - 100.0 * (ptt - 0.2)
    dbp = 80.0 + 0.2 * (heart_rate - 75.0) - 50.0 * (ptt - 0.2)
    return sbp, dbp


def synth_ecg(config: SyntheticConfig, record_id: str | None = None) -> SignalRecord:
    """Single-lead (lead II) synthetic ECG record."""
    return synth_multichannel(config, kinds=(ChannelKind.II,), record_id=record_id)


def synth_multichannel(
    config: SyntheticConfig,
    kinds: Iterable[ChannelKind] | None = None,
    record_id: str | None = None,
) -> SignalRecord:
    """12-lead ECG, PPG and ABP channels sharing one rhythm.

    Every channel draws its noise from its own seeded stream, so generating a
    subset of ``kinds`` yields the same values as subsetting the full record.
    """
    kinds = SIGNAL_KINDS if kinds is None else canonical_kinds(ChannelKind.parse(k) for k in kinds)
    rhythm = _rhythm(config)
    t = _time_axis(config)
    n = t.shape[0]
    channels: dict[ChannelKind, np.ndarray] = {}
    latent_a = latent_b = pulse = None
    labels: dict = {
        "condition": config.condition.value,
        "heart_rate_bpm": rhythm.heart_rate,
        "ptt_s": rhythm.ptt,
        "r_peak_times_s": [float(x) for x in rhythm.r_times if x < config.duration_s],
    }
    for kind in kinds:
        if kind in _LEAD_MIX:
            if latent_a is None:
                latent_a = _bump_train(t, rhythm, _BUMPS_A)
                latent_b = _bump_train(t, rhythm, _BUMPS_B)
            wa, wb = _LEAD_MIX[kind]
            clean = wa * latent_a + wb * latent_b
        elif kind in (ChannelKind.PPG, ChannelKind.ABP):
            if pulse is None:
                pulse = _pulse_train(t, rhythm)
            if kind is ChannelKind.PPG:
                clean = pulse
            else:
                sbp, dbp = blood_pressure_targets(rhythm.heart_rate, rhythm.ptt)
                lo, hi = pulse.min(), pulse.max()
                shape = (pulse - lo) / (hi - lo) if hi > lo else np.zeros_like(pulse)
                clean = dbp + (sbp - dbp) * shape
        else:
            raise VocabularyError(f"the generator cannot produce channel {kind.value!r}")
        noise = _channel_noise(config, kind, n)
        if kind is ChannelKind.ABP:
            noise = noise * 20.0
        channels[kind] = (clean + noise).astype(np.float32)
    if ChannelKind.ABP in channels:
        abp = channels[ChannelKind.ABP]
        labels["SBP_true"] = float(abp.max())
        labels["DBP_true"] = float(abp.min())
    return SignalRecord(
        record_id=record_id or f"syn-{config.rng_seed:06d}",
        sample_rate_hz=config.sample_rate_hz,
        channels=channels,
        report=_report(config, rhythm),
        labels=labels,
    )


def rr_coefficient_of_variation(peak_times) -> float:
    rr = np.diff(np.asarray(peak_times, dtype=float))
    if rr.size < 2:
        return 0.0
    return float(rr.std() / rr.mean())


# ---------------------------------------------------------------- corpora


@dataclasses.dataclass
class ManifestEntry:
    record_id: str
    split: str
    labels: dict
    path: str | None = None
    record: SignalRecord | None = dataclasses.field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "path": self.path, "split": self.split, "labels": self.labels}


def split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios {ratios} must be three non-negative values summing to 1")
    val = int(math.floor(n * ratios[1] + 1e-9))
    test = int(math.floor(n * ratios[2] + 1e-9))
    return n - val - test, val, test


def _label_summary(record: SignalRecord) -> dict:
    keep = ("condition", "heart_rate_bpm", "ptt_s", "SBP_true", "DBP_true", "source")
    return {k: record.labels[k] for k in keep if k in record.labels}


def make_corpus(
    n_records: int,
    template: SyntheticConfig,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    af_fraction: float = 0.5,
    kinds: Iterable[ChannelKind] | None = None,
    out_dir=None,
) -> tuple[list[ManifestEntry], list[ManifestEntry], list[ManifestEntry]]:
    """Generate ``n_records`` synthetic records and split them by record id.

    Exactly ``round(n_records * af_fraction)`` records are AF. With
    ``out_dir`` every record is written as ``<id>.cwb`` next to a
    ``manifest.jsonl``; otherwise entries carry the in-memory records.
    """
    if n_records < 10:
        raise ConfigError(f"a corpus needs at least 10 records, got {n_records}")
    sizes = split_sizes(n_records, ratios)
    rng = np.random.default_rng([seed, 17])
    n_af = int(round(n_records * af_fraction))
    conditions = np.array([Condition.AF] * n_af + [Condition.NORMAL] * (n_records - n_af), dtype=object)
    conditions = conditions[rng.permutation(n_records)]
    record_seeds = rng.integers(0, 2**31 - 1, size=n_records)
    kinds = tuple(kinds) if kinds is not None else None
    records = []
    for i in range(n_records):
        cfg = template.replace(rng_seed=int(record_seeds[i]), condition=conditions[i])
        records.append(synth_multichannel(cfg, kinds=kinds, record_id=f"rec{i:05d}"))
    order = rng.permutation(n_records)
    split_names = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    entries: dict[str, list[ManifestEntry]] = {"train": [], "val": [], "test": []}
    for position, idx in enumerate(order):
        rec = records[idx]
        entries[split_names[position]].append(ManifestEntry(rec.record_id, split_names[position], _label_summary(rec), record=rec))
    for split in entries.values():
        split.sort(key=lambda e: e.record_id)
    if out_dir is not None:
        write_corpus(entries["train"] + entries["val"] + entries["test"], out_dir)
    return entries["train"], entries["val"], entries["test"]


def write_corpus(entries: list[ManifestEntry], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in sorted(entries, key=lambda e: e.record_id):
        name = f"{entry.record_id}.cwb"
        save_record(entry.record, out / name)
        entry.path = name
        lines.append(json.dumps(entry.to_json(), sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path) -> list[ManifestEntry]:
    """Read a corpus manifest and load each referenced wavebundle."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise ParseError(f"manifest {path} not found")
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        rec = load_record(path.parent / d["path"])
        entries.append(ManifestEntry(d["record_id"], d["split"], d.get("labels") or {}, d["path"], record=rec))
    return entries


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))
