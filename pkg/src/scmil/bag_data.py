"""Patch bags, cohort manifests, and the synthetic cohort generator.

Bag file layout ("SCMB", little-endian)::

    offset  size     field
    0       4        magic b"SCMB"
    4       1        version (1)
    5       4        n, number of patches (u32)
    9       4        d, feature dimension (u32)
    13      2        patient id length L (u16)
    15      L        patient id, UTF-8
    15+L    16n      positions, n x 2 float64, row-major
    ...     8nd      features, n x d float64, row-major

The manifest is comma-separated text with the header
``patient_id,duration,event,bag_path``; durations are in years and
``bag_path`` is resolved relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

BAG_MAGIC = b"SCMB"
BAG_VERSION = 1
DAYS_PER_YEAR = 365.25
MANIFEST_HEADER = ["patient_id", "duration", "event", "bag_path"]

_HEADER = struct.Struct("<4sBIIH")


def days_to_years(days):
    return np.asarray(days, dtype=np.float64) / DAYS_PER_YEAR


@dataclass(eq=False)
class PatchBag:
    """One patient's patches: ``features`` is (n, d), ``positions`` is (n, 2)."""

    patient_id: str
    features: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError(f"bag {self.patient_id!r}: features must be (n>=1, d), got {self.features.shape}")
        if self.positions.shape != (self.features.shape[0], 2):
            raise ValidationError(
                f"bag {self.patient_id!r}: positions shape {self.positions.shape} "
                f"does not match {self.features.shape[0]} patches")
        if not (np.isfinite(self.features).all() and np.isfinite(self.positions).all()):
            raise ValidationError(f"bag {self.patient_id!r} contains non-finite values")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @cached_property
    def positions01(self):
        """Positions rescaled per axis into [0, 1] by the bag's bounding box.

        An axis with zero extent maps to 0.5.
        """
        lo = self.positions.min(axis=0)
        span = self.positions.max(axis=0) - lo
        out = np.full_like(self.positions, 0.5)
        ok = span > 0
        out[:, ok] = (self.positions[:, ok] - lo[ok]) / span[ok]
        return out


@dataclass(frozen=True)
class CohortRecord:
    patient_id: str
    duration: float
    event: int
    bag_path: str

    def __post_init__(self):
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ValidationError(f"patient {self.patient_id!r}: duration must be > 0, got {self.duration}")
        if self.event not in (0, 1):
            raise ValidationError(f"patient {self.patient_id!r}: event must be 0 or 1, got {self.event}")


def cohort_arrays(records):
    """Durations and event flags of ``records`` as numpy arrays."""
    durations = np.array([r.duration for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    return durations, events


# ---------------------------------------------------------------- bag files

def write_bag(bag, path):
    key = bag.patient_id.encode("utf-8")
    header = _HEADER.pack(BAG_MAGIC, BAG_VERSION, bag.n, bag.d, len(key))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(key)
        fh.write(np.ascontiguousarray(bag.positions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bag.features, dtype="<f8").tobytes())


def load_bag(path, expected_d=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header", len(buf))
    magic, version, n, d, key_len = _HEADER.unpack_from(buf, 0)
    if magic != BAG_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != BAG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    if n < 1:
        raise FormatError(f"{path}: bag declares zero patches", 5)
    if expected_d is not None and d != expected_d:
        raise FormatError(f"{path}: feature dimension {d} does not match cohort dimension {expected_d}", 9)
    off = _HEADER.size
    if off + key_len > len(buf):
        raise FormatError(f"{path}: truncated patient id", len(buf))
    patient_id = buf[off:off + key_len].decode("utf-8")
    off += key_len
    expected = off + 8 * n * (2 + d)
    if len(buf) < expected:
        raise FormatError(f"{path}: payload truncated, header implies {expected} bytes, found {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} trailing bytes after payload", expected)
    positions = np.frombuffer(buf, dtype="<f8", count=2 * n, offset=off).reshape(n, 2)
    features = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off + 16 * n).reshape(n, d)
    try:
        return PatchBag(patient_id, features.astype(np.float64), positions.astype(np.float64))
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}", off) from None


# ---------------------------------------------------------------- manifests

def write_manifest(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.patient_id, repr(float(r.duration)), r.event, r.bag_path])


def load_manifest(path, check_files=True):
    path = Path(path)
    records = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ValidationError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}", row=1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValidationError(f"expected 4 fields, got {len(row)}", row=line)
            pid, dur, ev, bag_path = (c.strip() for c in row)
            try:
                duration = float(dur)
            except ValueError:
                raise ValidationError(f"duration {dur!r} is not a number", row=line) from None
            if not (math.isfinite(duration) and duration > 0):
                raise ValidationError(f"duration must be > 0, got {dur}", row=line)
            if ev not in ("0", "1"):
                raise ValidationError(f"event must be 0 or 1, got {ev!r}", row=line)
            if pid in seen:
                raise ValidationError(f"duplicate patient id {pid!r}", row=line)
            seen.add(pid)
            if check_files and not (path.parent / bag_path).is_file():
                raise ValidationError(f"bag file {bag_path!r} not found", row=line)
            records.append(CohortRecord(pid, duration, int(ev), bag_path))
    return records


def load_cohort(manifest_path):
    """Load a manifest and every bag it references, keyed by patient id."""
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path)
    bags = {}
    d = None
    for r in records:
        bag = load_bag(manifest_path.parent / r.bag_path, expected_d=d)
        d = bag.d
        if bag.patient_id != r.patient_id:
            raise ValidationError(f"bag {r.bag_path!r} holds patient {bag.patient_id!r}, manifest says {r.patient_id!r}")
        bags[r.patient_id] = bag
    return bags, records


def write_cohort(out_dir, bags, records):
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    by_id = {b.patient_id: b for b in bags}
    for r in records:
        write_bag(by_id[r.patient_id], out_dir / r.bag_path)
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    return manifest


# ---------------------------------------------------------------- synthetic cohorts

@dataclass
class SyntheticConfig:
    """Knobs of the planted-signal cohort generator.

    A patient's risk r is the fraction of its patches that belong to a
    spatially compact "risky" clique. r is drawn as
    ``lo + (hi - lo) * Beta(c, c)`` with ``c = risky_fraction_concentration``;
    values of c below 1 push patients toward the ends of the range.
    """

    n_patients: int = 200
    patches_per_bag: tuple = (256, 1024)
    d: int = 32
    risky_direction: list | None = None
    risky_fraction_range: tuple = (0.0, 1.0)
    risky_fraction_concentration: float = 0.3
    risky_shift: float = 2.0
    clique_spread: float = 0.05
    slide_extent: float = 1000.0
    base_hazard: float = 0.2
    hazard_multiplier: float = 16.0
    censor_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.patches_per_bag = tuple(int(v) for v in self.patches_per_bag)
        self.risky_fraction_range = tuple(float(v) for v in self.risky_fraction_range)
        lo, hi = self.patches_per_bag
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if not 1 <= lo <= hi:
            raise ConfigError(f"patches_per_bag must satisfy 1 <= lo <= hi, got {self.patches_per_bag}")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        flo, fhi = self.risky_fraction_range
        if not 0.0 <= flo <= fhi <= 1.0:
            raise ConfigError(f"risky_fraction_range must be a sub-interval of [0, 1], got {self.risky_fraction_range}")
        if not 0.0 <= self.censor_rate <= 1.0:
            raise ConfigError("censor_rate must lie in [0, 1]")
        if self.base_hazard <= 0 or self.hazard_multiplier <= 0:
            raise ConfigError("base_hazard and hazard_multiplier must be positive")
        if self.risky_fraction_concentration <= 0:
            raise ConfigError("risky_fraction_concentration must be positive")
        if self.risky_direction is not None:
            u = np.asarray(self.risky_direction, dtype=np.float64)
            if u.shape != (self.d,) or not np.isclose(np.linalg.norm(u), 1.0):
                raise ConfigError("risky_direction must be a unit vector of length d")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["patches_per_bag"] = list(self.patches_per_bag)
        out["risky_fraction_range"] = list(self.risky_fraction_range)
        return out


def _direction(cfg, rng):
    if cfg.risky_direction is not None:
        return np.asarray(cfg.risky_direction, dtype=np.float64)
    u = rng.standard_normal(cfg.d)
    return u / np.linalg.norm(u)


def generate_synthetic_cohort(cfg, return_risk=False):
    """Build ``(bags, records)`` for a cohort with a planted survival signal.

    Event times are exponential with rate ``base_hazard * hazard_multiplier**r``.
    Each patient is censored independently with probability ``censor_rate``,
    at a time uniform on (0, event time).
    """
    rng = np.random.default_rng(cfg.seed)
    u = _direction(cfg, rng)
    lo, hi = cfg.patches_per_bag
    flo, fhi = cfg.risky_fraction_range
    c = cfg.risky_fraction_concentration
    bags, records, risks = [], [], []
    width = max(4, len(str(cfg.n_patients - 1)))
    for i in range(cfg.n_patients):
        pid = f"P{i:0{width}d}"
        n = int(rng.integers(lo, hi + 1))
        frac = flo + (fhi - flo) * rng.beta(c, c)
        n_risky = int(round(frac * n))
        r = n_risky / n

        feats = rng.standard_normal((n, cfg.d))
        pos = rng.uniform(0.0, 1.0, size=(n, 2))
        if n_risky:
            centre = rng.uniform(0.2, 0.8, size=2)
            pos[:n_risky] = np.clip(centre + cfg.clique_spread * rng.standard_normal((n_risky, 2)), 0.0, 1.0)
            noise = feats[:n_risky]
            along = cfg.risky_shift + np.abs(rng.standard_normal(n_risky))
            feats[:n_risky] = noise - np.outer(noise @ u, u) + np.outer(along, u)
        order = rng.permutation(n)
        bag = PatchBag(pid, feats[order], pos[order] * cfg.slide_extent)

        rate = cfg.base_hazard * cfg.hazard_multiplier ** r
        t_event = rng.exponential(1.0 / rate)
        censored = rng.random() < cfg.censor_rate
        t_censor = rng.uniform(0.0, t_event)
        duration = max(t_censor if censored else t_event, 1e-9)
        records.append(CohortRecord(pid, float(duration), 0 if censored else 1, f"bags/{pid}.scmb"))
        bags.append(bag)
        risks.append(r)
    if return_risk:
        return bags, records, np.array(risks)
    return bags, records
