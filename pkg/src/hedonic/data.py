"""Tabular ingestion, feature normalization, image loading, and splits.

The target transform is shared by every model: natural log of price,
z-scored with statistics from the training split. Metrics are always
computed after inverting this transform back to USD.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageReadError, SchemaError

log = logging.getLogger(__name__)

LAT_LIMIT = 85.05112878
REQUIRED_COLUMNS = ("id", "lat", "lon", "price")


@dataclass
class PropertyRecord:
    id: str
    lat: float
    lon: float
    price: float
    numeric: dict = field(default_factory=dict)
    categorical: dict = field(default_factory=dict)
    image_path: str | None = None


@dataclass
class RejectedRow:
    row: int          # 1-based data row number (header not counted)
    record_id: str
    reason: str


@dataclass
class LoadReport:
    records: list
    rejects: list

    @property
    def n_rejected(self):
        return len(self.rejects)


def load_tabular_csv(path, numeric_features=(), categorical_features=()) -> LoadReport:
    """Parse a property CSV, rejecting rows that violate record invariants.

    Required columns: id, lat, lon, price. Declared feature columns must all
    be present (SchemaError otherwise). Bad rows are rejected individually
    with a reason, never raised.
    """
    path = Path(path)
    records, rejects = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in (*REQUIRED_COLUMNS, *numeric_features, *categorical_features)
                   if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required columns: {', '.join(missing)}")
        has_image_col = "image_path" in header
        for i, row in enumerate(reader, start=1):
            rid = (row.get("id") or "").strip()
            if not rid:
                rejects.append(RejectedRow(i, "", "empty id"))
                continue
            reason = None
            lat = lon = price = 0.0
            numeric = {}
            try:
                lat = float(row["lat"])
                lon = float(row["lon"])
                price = float(row["price"])
                for name in numeric_features:
                    numeric[name] = float(row[name])
            except (TypeError, ValueError):
                reason = "unparsable number"
            if reason is None and not price > 0:
                reason = "nonpositive price"
            if reason is None and not (-LAT_LIMIT <= lat <= LAT_LIMIT):
                reason = "latitude out of range"
            if reason is None and not (-180.0 <= lon < 180.0):
                reason = "longitude out of range"
            if reason is None and any(not math.isfinite(v) for v in numeric.values()):
                reason = "non-finite numeric feature"
            if reason is None and not math.isfinite(price):
                reason = "non-finite price"
            if reason is not None:
                rejects.append(RejectedRow(i, rid, reason))
                continue
            categorical = {name: row[name] for name in categorical_features}
            image_path = row["image_path"].strip() or None if has_image_col else None
            records.append(PropertyRecord(rid, lat, lon, price, numeric, categorical, image_path))
    if rejects:
        log.info("%s: loaded %d records, rejected %d rows", path, len(records), len(rejects))
    return LoadReport(records, rejects)


# ---------------------------------------------------------------------------
# feature schema
# ---------------------------------------------------------------------------

@dataclass
class FeatureSchema:
    """Fitted normalization state: feature stats, vocabularies, target transform.

    Immutable after fitting; serialized into checkpoints so inference applies
    the exact same encoding as training.
    """

    numeric_names: list
    numeric_means: list
    numeric_stds: list
    dropped_numeric: list
    categorical_names: list
    vocabularies: dict
    log_price_mean: float
    log_price_std: float
    image_mean: list | None = None   # per-channel, over [0,1] pixels of train images
    image_std: list | None = None

    @property
    def dim(self) -> int:
        return len(self.numeric_names) + sum(len(self.vocabularies[c]) for c in self.categorical_names)

    def transform_price(self, price):
        return (np.log(price) - self.log_price_mean) / self.log_price_std

    def inverse_transform_price(self, z):
        return np.exp(np.asarray(z, dtype=np.float64) * self.log_price_std + self.log_price_mean)

    def to_dict(self):
        return {
            "numeric_names": list(self.numeric_names),
            "numeric_means": [float(v) for v in self.numeric_means],
            "numeric_stds": [float(v) for v in self.numeric_stds],
            "dropped_numeric": list(self.dropped_numeric),
            "categorical_names": list(self.categorical_names),
            "vocabularies": {k: list(v) for k, v in self.vocabularies.items()},
            "log_price_mean": float(self.log_price_mean),
            "log_price_std": float(self.log_price_std),
            "image_mean": None if self.image_mean is None else [float(v) for v in self.image_mean],
            "image_std": None if self.image_std is None else [float(v) for v in self.image_std],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def fit_normalizer(records, numeric_features, categorical_features) -> FeatureSchema:
    """Fit per-feature stats on the given records only (the training split).

    Population stddev (divide by n). Constant columns are dropped and
    recorded. Stores log-price mean/stddev for the target transform.
    """
    if len(records) < 2:
        raise ValueError(f"fit_normalizer needs at least 2 records, got {len(records)}")
    kept, means, stds, dropped = [], [], [], []
    for name in numeric_features:
        vals = np.array([r.numeric[name] for r in records], dtype=np.float64)
        mean = float(vals.mean())
        std = float(vals.std())  # population convention
        if std == 0.0:
            dropped.append(name)
            continue
        kept.append(name)
        means.append(mean)
        stds.append(std)
    if dropped:
        log.info("dropping constant numeric columns: %s", ", ".join(dropped))
    vocabularies = {
        name: sorted({r.categorical[name] for r in records})
        for name in categorical_features
    }
    logp = np.log([r.price for r in records])
    log_std = float(logp.std())
    return FeatureSchema(
        numeric_names=kept,
        numeric_means=means,
        numeric_stds=stds,
        dropped_numeric=dropped,
        categorical_names=list(categorical_features),
        vocabularies=vocabularies,
        log_price_mean=float(logp.mean()),
        log_price_std=log_std if log_std > 0 else 1.0,
    )


def apply_normalizer(schema: FeatureSchema, record: PropertyRecord) -> np.ndarray:
    """Encode one record: z-scored numerics, then one-hot blocks in vocab order.

    Unknown category values map to an all-zero block; missing feature keys
    are an error.
    """
    out = np.zeros(schema.dim, dtype=np.float32)
    for j, name in enumerate(schema.numeric_names):
        if name not in record.numeric:
            raise ValueError(f"record {record.id}: missing numeric feature '{name}'")
        out[j] = (record.numeric[name] - schema.numeric_means[j]) / schema.numeric_stds[j]
    offset = len(schema.numeric_names)
    for name in schema.categorical_names:
        if name not in record.categorical:
            raise ValueError(f"record {record.id}: missing categorical feature '{name}'")
        vocab = schema.vocabularies[name]
        value = record.categorical[name]
        try:
            out[offset + vocab.index(value)] = 1.0
        except ValueError:
            pass  # unknown category: all-zero block
        offset += len(vocab)
    return out


def encode_records(schema: FeatureSchema, records) -> np.ndarray:
    if not records:
        return np.zeros((0, schema.dim), dtype=np.float32)
    return np.stack([apply_normalizer(schema, r) for r in records])


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int
    ratios: tuple


def split_dataset(ids, seed: int, ratios=(0.7, 0.15, 0.15)) -> DatasetSplit:
    """Deterministic shuffle then contiguous partition.

    Sizes are floor-allocated from the ratios; the remainder goes to train.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("split_dataset: empty id list")
    if len(set(ids)) != len(ids):
        raise ValueError("split_dataset: ids must be unique")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split_dataset: ratios must sum to 1, got {sum(ratios)}")
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train += n - (n_train + n_val + n_test)
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:n_train + n_val + n_test],
        seed=seed,
        ratios=tuple(ratios),
    )


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def load_image_patch(path, out_size: int, mean=None, std=None) -> np.ndarray:
    """Load an RGB PNG as float32 (3, out_size, out_size).

    Pixels are scaled to [0,1], bilinearly resampled if the source size
    differs, then standardized per channel when mean/std are given.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (out_size, out_size):
                im = im.resize((out_size, out_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageReadError(path, exc) from exc
    x = arr.transpose(2, 0, 1)
    if mean is not None and std is not None:
        mean = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
        std = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
        x = (x - mean) / std
    return np.ascontiguousarray(x)


def fit_image_stats(paths):
    """Per-channel mean/stddev over [0,1] pixels of the given images.

    Run on training-split images only; the result is stored on the schema.
    """
    if not paths:
        raise ValueError("fit_image_stats: no images given")
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for p in paths:
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, ValueError) as exc:
            raise ImageReadError(p, exc) from exc
        total += arr.sum(axis=(0, 1))
        total_sq += (arr ** 2).sum(axis=(0, 1))
        count += arr.shape[0] * arr.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    std = np.sqrt(var)
    std[std == 0] = 1.0
    return mean.tolist(), std.tolist()


def resolve_image_path(record: PropertyRecord, image_dir) -> Path:
    """record.image_path wins; otherwise the {image_dir}/{id}.png convention."""
    if record.image_path:
        return Path(record.image_path)
    if image_dir is None:
        raise ValueError(f"record {record.id}: no image_path and no image_dir configured")
    return Path(image_dir) / f"{record.id}.png"


# ---------------------------------------------------------------------------
# model-ready arrays
# ---------------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """Encoded arrays for one split: features, transformed target, USD prices."""

    ids: list
    x: np.ndarray             # (n, d) float32
    y: np.ndarray             # (n, 1) float32, z-scored log price
    price: np.ndarray         # (n,) float64 USD
    images: np.ndarray | None = None   # (n, 3, s, s) float32, standardized

    def __len__(self):
        return len(self.ids)


def build_arrays(records, schema: FeatureSchema, image_dir=None, image_size=None,
                 with_images=False) -> ArrayDataset:
    x = encode_records(schema, records)
    price = np.array([r.price for r in records], dtype=np.float64)
    y = schema.transform_price(price).astype(np.float32).reshape(-1, 1)
    images = None
    if with_images:
        if image_size is None:
            raise ValueError("build_arrays: image_size required when with_images")
        images = np.stack([
            load_image_patch(resolve_image_path(r, image_dir), image_size,
                             schema.image_mean, schema.image_std)
            for r in records
        ]) if records else np.zeros((0, 3, image_size, image_size), dtype=np.float32)
    return ArrayDataset([r.id for r in records], x, y, price, images)
