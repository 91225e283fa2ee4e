"""Per-class streaming feature statistics ("data watchers").

A watcher sits at one site of the head, average-pools the activation of
each instance over its spatial axes and folds it into running class-wise
mean / Bessel-corrected variance / count via the pairwise merge rule.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, DimensionError

MAGIC = b"NIFFSTAT"
VERSION = 1


class InsufficientDataError(RuntimeError):
    def __init__(self, site_id: str, class_id: int, count: int):
        super().__init__(
            f"site {site_id!r} class {class_id}: {count} sample(s), need at least 2 "
            "for a corrected variance"
        )
        self.site_id = site_id
        self.class_id = class_id
        self.count = count


def pool_instance(feature_map: np.ndarray) -> np.ndarray:
    """Spatially average a ``C x H x W`` map; vectors pass through unchanged."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim == 1:
        return fm.copy()
    if fm.ndim != 3 or fm.shape[1] < 1 or fm.shape[2] < 1:
        raise DimensionError(f"expected C x H x W map or vector, got {fm.shape}")
    return fm.reshape(fm.shape[0], -1).mean(axis=1)


def pool_batch(features: np.ndarray) -> np.ndarray:
    """Batched :func:`pool_instance`: ``N x C x H x W -> N x C``, ``N x d`` unchanged."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 2:
        return f
    return f.reshape(f.shape[0], f.shape[1], -1).mean(axis=2)


def merge_stats(a, b):
    """Combine two ``(mean, var, n)`` summaries.

    ``var`` is the corrected (n-1) variance; for ``n < 2`` it is ignored and
    conventionally stored as zero.
    """
    mean_a, var_a, n_a = a
    mean_b, var_b, n_b = b
    if n_a < 0 or n_b < 0:
        raise ContractError("counts must be nonnegative")
    if n_a + n_b == 0:
        raise ContractError("cannot merge two empty summaries")
    if n_b == 0:
        return np.array(mean_a, dtype=np.float64), np.array(var_a, dtype=np.float64), n_a
    if n_a == 0:
        return np.array(mean_b, dtype=np.float64), np.array(var_b, dtype=np.float64), n_b
    mean_a = np.asarray(mean_a, dtype=np.float64)
    mean_b = np.asarray(mean_b, dtype=np.float64)
    if mean_a.shape != mean_b.shape:
        raise DimensionError(f"merge_stats: dims {mean_a.shape} and {mean_b.shape} differ")
    n = n_a + n_b
    mean = (n_a * mean_a + n_b * mean_b) / n
    delta = mean_b - mean_a
    var = ((n_a - 1) * np.asarray(var_a) + (n_b - 1) * np.asarray(var_b)) / (n - 1)
    var = var + n_a * n_b * delta * delta / (n * (n - 1))
    return mean, var, n


def batch_stats(samples: np.ndarray):
    """Two-pass ``(mean, corrected var, n)`` of the rows of ``samples``."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return np.zeros(x.shape[1:]), np.zeros(x.shape[1:]), 0
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1) if n >= 2 else np.zeros_like(mean)
    return mean, var, n


@dataclass
class RunningClassStats:
    num_classes: int
    dim: int
    mean: np.ndarray = field(init=False)
    var: np.ndarray = field(init=False)
    count: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean = np.zeros((self.num_classes, self.dim))
        self.var = np.zeros((self.num_classes, self.dim))
        self.count = np.zeros(self.num_classes, dtype=np.int64)

    def absorb(self, class_id: int, summary) -> None:
        cur = (self.mean[class_id], self.var[class_id], int(self.count[class_id]))
        m, v, n = merge_stats(cur, summary)
        self.mean[class_id], self.var[class_id], self.count[class_id] = m, v, n


class DataWatcher:
    """Running class-wise statistics at one head site.

    With ``class_agnostic=True`` every sample lands in a single bucket,
    which is what the shared-statistics ablation needs.
    """

    def __init__(self, site_id: str, dim: int, num_classes: int, class_agnostic: bool = False):
        self.site_id = site_id
        self.dim = dim
        self.num_classes = num_classes
        self.class_agnostic = class_agnostic
        self.stats = RunningClassStats(1 if class_agnostic else num_classes, dim)

    def _bucket(self, class_label: int) -> int:
        if not 0 <= class_label < self.num_classes:
            raise ContractError(
                f"class label {class_label} outside [0, {self.num_classes}) at {self.site_id!r}"
            )
        return 0 if self.class_agnostic else int(class_label)

    def observe(self, pooled: np.ndarray, class_label: int) -> None:
        pooled = np.asarray(pooled, dtype=np.float64)
        if pooled.shape != (self.dim,):
            raise DimensionError(f"{self.site_id}: expected length {self.dim}, got {pooled.shape}")
        bucket = self._bucket(int(class_label))
        self.stats.absorb(bucket, (pooled, np.zeros(self.dim), 1))

    def observe_batch(self, pooled: np.ndarray, labels: np.ndarray) -> None:
        """Absorb ``N x d`` pooled rows; each class's rows merge as one batch."""
        pooled = np.asarray(pooled, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if pooled.ndim != 2 or pooled.shape[1] != self.dim or len(labels) != len(pooled):
            raise DimensionError(f"{self.site_id}: bad batch shape {pooled.shape}")
        buckets = np.array([self._bucket(int(c)) for c in labels], dtype=np.int64)
        for b in np.unique(buckets):
            self.stats.absorb(int(b), batch_stats(pooled[buckets == b]))


@dataclass
class SiteStats:
    site_id: str
    mean: np.ndarray  # classes x d
    var: np.ndarray
    count: np.ndarray  # classes

    @property
    def dim(self) -> int:
        return self.mean.shape[1]


@dataclass
class StatsSnapshot:
    """Frozen class-wise statistics of all watchers of one head."""

    num_classes: int
    sites: list[SiteStats]

    @property
    def site_ids(self) -> list[str]:
        return [s.site_id for s in self.sites]

    def site(self, site_id: str) -> SiteStats:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise KeyError(site_id)

    @property
    def class_agnostic(self) -> bool:
        return self.num_classes == 1

    def equals(self, other: StatsSnapshot) -> bool:
        """Bit-exact comparison."""
        if self.num_classes != other.num_classes or self.site_ids != other.site_ids:
            return False
        for a, b in zip(self.sites, other.sites):
            if not (
                np.array_equal(a.count, b.count)
                and a.mean.tobytes() == b.mean.tobytes()
                and a.var.tobytes() == b.var.tobytes()
            ):
                return False
        return True

    # binary form ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<III", VERSION, self.num_classes, len(self.sites))]
        for s in self.sites:
            name = s.site_id.encode("utf-8")
            parts.append(struct.pack("<I", len(name)) + name + struct.pack("<I", s.dim))
        for s in self.sites:
            for c in range(self.num_classes):
                parts.append(struct.pack("<Q", int(s.count[c])))
                parts.append(s.mean[c].astype("<f8").tobytes())
                parts.append(s.var[c].astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> StatsSnapshot:
        if buf[:8] != MAGIC:
            raise ValueError("not a statistics snapshot (bad magic)")
        version, num_classes, n_sites = struct.unpack_from("<III", buf, 8)
        if version != VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        off = 20
        table = []
        for _ in range(n_sites):
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (dim,) = struct.unpack_from("<I", buf, off)
            off += 4
            table.append((name, dim))
        sites = []
        for name, dim in table:
            mean = np.empty((num_classes, dim))
            var = np.empty((num_classes, dim))
            count = np.empty(num_classes, dtype=np.int64)
            for c in range(num_classes):
                (count[c],) = struct.unpack_from("<Q", buf, off)
                off += 8
                mean[c] = np.frombuffer(buf, "<f8", dim, off)
                off += 8 * dim
                var[c] = np.frombuffer(buf, "<f8", dim, off)
                off += 8 * dim
            sites.append(SiteStats(name, mean, var, count))
        if off != len(buf):
            raise ValueError("trailing bytes after snapshot payload")
        return cls(num_classes, sites)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> StatsSnapshot:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    # text form --------------------------------------------------------------

    def to_json(self) -> str:
        # repr-based float encoding in json is shortest-round-trip, hence lossless
        doc = {
            "format": MAGIC.decode(),
            "version": VERSION,
            "num_classes": self.num_classes,
            "sites": [
                {
                    "site_id": s.site_id,
                    "dim": s.dim,
                    "count": [int(n) for n in s.count],
                    "mean": s.mean.tolist(),
                    "var": s.var.tolist(),
                }
                for s in self.sites
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> StatsSnapshot:
        doc = json.loads(text)
        if doc.get("format") != MAGIC.decode() or doc.get("version") != VERSION:
            raise ValueError("not a version-1 statistics snapshot")
        n = doc["num_classes"]
        sites = []
        for s in doc["sites"]:
            mean = np.array(s["mean"], dtype=np.float64).reshape(n, s["dim"])
            var = np.array(s["var"], dtype=np.float64).reshape(n, s["dim"])
            sites.append(SiteStats(s["site_id"], mean, var, np.array(s["count"], dtype=np.int64)))
        return cls(n, sites)


def snapshot(watchers: list[DataWatcher]) -> StatsSnapshot:
    """Copy the watchers' current state; refuses any class with fewer than 2 samples."""
    if not watchers:
        raise ContractError("no watchers to snapshot")
    ids = [w.site_id for w in watchers]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate site ids: {ids}")
    num_classes = watchers[0].stats.num_classes
    sites = []
    for w in watchers:
        if w.stats.num_classes != num_classes:
            raise ContractError("watchers disagree on class bucketing")
        for c in range(num_classes):
            if w.stats.count[c] < 2:
                raise InsufficientDataError(w.site_id, c, int(w.stats.count[c]))
        sites.append(SiteStats(w.site_id, w.stats.mean.copy(), w.stats.var.copy(), w.stats.count.copy()))
    return StatsSnapshot(num_classes, sites)
