#!/usr/bin/env python3
"""
HierLoc dataset handling
UJIIndoorLoc-format CSV loading/writing, RSSI normalization, coordinate
scaling, seeded train/validation split and a noiseless synthetic generator
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from tensor_core import DTYPE, HierLocError, SeededRng

logger = logging.getLogger(__name__)

AP_COUNT = 520
NOT_DETECTED = 100
LABEL_COLUMNS = [
    "LONGITUDE", "LATITUDE", "FLOOR", "BUILDINGID", "SPACEID",
    "RELATIVEPOSITION", "USERID", "PHONEID", "TIMESTAMP",
]


class DatasetError(HierLocError):
    pass


class DatasetFormatError(DatasetError):
    pass


class LabelRangeError(DatasetError, ValueError):
    pass


def wap_columns(ap_count: int = AP_COUNT) -> List[str]:
    return [f"WAP{i:03d}" for i in range(1, ap_count + 1)]


def schema_columns(ap_count: int = AP_COUNT) -> List[str]:
    return wap_columns(ap_count) + LABEL_COLUMNS


@dataclass(eq=False)
class FingerprintRecord:
    """One labeled scan; rssi is a read-only float64 vector in dBm (100 = not detected)"""
    rssi: np.ndarray
    longitude: float
    latitude: float
    floor: int
    building_id: int
    space_id: int = 0
    relative_position: int = 0
    user_id: int = 0
    phone_id: int = 0
    timestamp: int = 0

    def __post_init__(self):
        rssi = np.asarray(self.rssi, dtype=DTYPE)
        if rssi.flags.writeable:
            rssi = rssi.copy()
            rssi.setflags(write=False)
        self.rssi = rssi

    def __eq__(self, other):
        if not isinstance(other, FingerprintRecord):
            return NotImplemented
        return (
            np.array_equal(self.rssi, other.rssi)
            and (self.longitude, self.latitude, self.floor, self.building_id, self.space_id,
                 self.relative_position, self.user_id, self.phone_id, self.timestamp)
            == (other.longitude, other.latitude, other.floor, other.building_id, other.space_id,
                other.relative_position, other.user_id, other.phone_id, other.timestamp)
        )


@dataclass(frozen=True)
class DatasetMeta:
    building_count: int
    floor_count: int
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if self.building_count < 1 or self.floor_count < 1:
            raise DatasetError(
                f"building_count and floor_count must be >= 1, got {self.building_count} and {self.floor_count}"
            )
        for low, high, axis in ((self.lon_min, self.lon_max, "longitude"), (self.lat_min, self.lat_max, "latitude")):
            if not (np.isfinite(low) and np.isfinite(high)):
                raise DatasetError(f"{axis} bounds must be finite, got [{low}, {high}]")
            if not low < high:
                raise DatasetError(f"degenerate {axis} bounds [{low}, {high}]; coordinates cannot be scaled")

    def to_dict(self) -> dict:
        return {
            "building_count": self.building_count,
            "floor_count": self.floor_count,
            "lon_min": self.lon_min,
            "lon_max": self.lon_max,
            "lat_min": self.lat_min,
            "lat_max": self.lat_max,
        }

    @classmethod
    def from_records(cls, records: Sequence[FingerprintRecord], building_count: int, floor_count: int) -> "DatasetMeta":
        lon = np.array([r.longitude for r in records], dtype=DTYPE)
        lat = np.array([r.latitude for r in records], dtype=DTYPE)
        return cls(building_count, floor_count, float(lon.min()), float(lon.max()), float(lat.min()), float(lat.max()))


@dataclass
class SplitDataset:
    train: List[FingerprintRecord]
    validation: List[FingerprintRecord]
    test: List[FingerprintRecord]
    meta: DatasetMeta
    seed: int = 0


@dataclass
class FeatureSet:
    """Training-ready arrays for a record list"""
    features: np.ndarray
    building: np.ndarray
    floor: np.ndarray
    xy: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def _row_label(index: int) -> str:
    # data row 1 sits on file line 2, below the header
    return f"row {index + 1} (line {index + 2})"


def _diagnose_cells(path: Path, expected: List[str]) -> None:
    """Re-read as text to name the first short row or non-numeric cell"""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    frame.columns = expected
    padded = frame.isna()
    bad = frame.apply(pd.to_numeric, errors="coerce").isna()
    if not bad.to_numpy().any():
        raise DatasetFormatError(f"{path}: unparseable numeric content")
    row = int(np.argmax(bad.to_numpy().any(axis=1)))
    if padded.iloc[row].any():
        found = int((~padded.iloc[row]).sum())
        raise DatasetFormatError(f"{path}: {_row_label(row)} has {found} fields, expected {len(expected)}")
    column = expected[int(np.argmax(bad.iloc[row].to_numpy()))]
    raise DatasetFormatError(
        f"{path}: {_row_label(row)} column {column} is not numeric: {frame.iloc[row][column]!r}"
    )


def load_ujiindoorloc(
    path: Union[str, Path],
    building_count: int = 3,
    floor_count: int = 5,
    ap_count: int = AP_COUNT,
) -> List[FingerprintRecord]:
    """Parse a UJIIndoorLoc CSV into records, in file order"""
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"dataset file not found: {path}")

    try:
        numeric = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DatasetFormatError(f"{path}: file is empty") from None
    except pd.errors.ParserError as e:
        raise DatasetFormatError(f"{path}: wrong column count: {e}") from e

    expected = schema_columns(ap_count)
    columns = [str(c).strip() for c in numeric.columns]
    if columns != expected:
        if len(columns) != len(expected):
            raise DatasetFormatError(
                f"{path}: header has {len(columns)} columns, expected {len(expected)} "
                f"({expected[0]}..{expected[ap_count - 1]} then {', '.join(LABEL_COLUMNS)})"
            )
        position = next(i for i, (got, want) in enumerate(zip(columns, expected)) if got != want)
        raise DatasetFormatError(
            f"{path}: header column {position + 1} is {columns[position]!r}, expected {expected[position]!r}"
        )
    numeric.columns = expected

    all_numeric = all(pd.api.types.is_numeric_dtype(dtype) for dtype in numeric.dtypes)
    if not all_numeric or numeric.isna().to_numpy().any():
        _diagnose_cells(path, expected)

    rssi = numeric[wap_columns(ap_count)].to_numpy(dtype=DTYPE)
    rssi.setflags(write=False)
    labels = numeric[LABEL_COLUMNS].to_numpy(dtype=DTYPE)

    records = []
    for i in range(len(numeric)):
        lon, lat, floor, building, space, relpos, user, phone, stamp = labels[i]
        if floor != int(floor) or not 0 <= floor < floor_count:
            raise LabelRangeError(f"{path}: {_row_label(i)} FLOOR={floor:g} outside [0, {floor_count - 1}]")
        if building != int(building) or not 0 <= building < building_count:
            raise LabelRangeError(
                f"{path}: {_row_label(i)} BUILDINGID={building:g} outside [0, {building_count - 1}]"
            )
        records.append(FingerprintRecord(
            rssi=rssi[i],
            longitude=float(lon),
            latitude=float(lat),
            floor=int(floor),
            building_id=int(building),
            space_id=int(space),
            relative_position=int(relpos),
            user_id=int(user),
            phone_id=int(phone),
            timestamp=int(stamp),
        ))

    logger.info(f"📄 Loaded {len(records)} fingerprints from {path}")
    return records


def records_to_frame(records: Sequence[FingerprintRecord]) -> pd.DataFrame:
    ap_count = records[0].rssi.shape[0] if records else AP_COUNT
    rssi = np.array([r.rssi for r in records], dtype=DTYPE).reshape(len(records), ap_count)
    frame = pd.DataFrame(rssi, columns=wap_columns(ap_count))
    if np.array_equal(rssi, np.round(rssi)):
        frame = frame.astype(np.int64)
    frame["LONGITUDE"] = [r.longitude for r in records]
    frame["LATITUDE"] = [r.latitude for r in records]
    frame["FLOOR"] = [r.floor for r in records]
    frame["BUILDINGID"] = [r.building_id for r in records]
    frame["SPACEID"] = [r.space_id for r in records]
    frame["RELATIVEPOSITION"] = [r.relative_position for r in records]
    frame["USERID"] = [r.user_id for r in records]
    frame["PHONEID"] = [r.phone_id for r in records]
    frame["TIMESTAMP"] = [r.timestamp for r in records]
    return frame


def write_ujiindoorloc(records: Sequence[FingerprintRecord], path: Union[str, Path]) -> Path:
    """Serialize records in the UJIIndoorLoc schema; load_ujiindoorloc reads them back unchanged"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_to_frame(records).to_csv(path, index=False, encoding="utf-8")
    logger.info(f"💾 Wrote {len(records)} fingerprints to {path}")
    return path


def normalize_rssi(raw):
    """Sentinel 100 maps to 0.0, otherwise clamp((raw + 110) / 110, 0, 1); works on scalars and arrays"""
    arr = np.asarray(raw, dtype=DTYPE)
    out = np.where(arr == NOT_DETECTED, 0.0, np.clip((arr + 110.0) / 110.0, 0.0, 1.0))
    if out.ndim == 0:
        return float(out)
    return out


def _check_bounds(meta: DatasetMeta) -> None:
    if not (meta.lon_min < meta.lon_max and meta.lat_min < meta.lat_max):
        raise DatasetError("degenerate coordinate bounds; cannot scale")


def scale_coordinates(xy, meta: DatasetMeta) -> np.ndarray:
    """Per-axis affine map min -> -1, max -> +1; values outside the bounds are not clamped"""
    _check_bounds(meta)
    xy = np.asarray(xy, dtype=DTYPE)
    low = np.array([meta.lon_min, meta.lat_min], dtype=DTYPE)
    span = np.array([meta.lon_max - meta.lon_min, meta.lat_max - meta.lat_min], dtype=DTYPE)
    return 2.0 * (xy - low) / span - 1.0


def unscale_coordinates(scaled, meta: DatasetMeta) -> np.ndarray:
    _check_bounds(meta)
    scaled = np.asarray(scaled, dtype=DTYPE)
    low = np.array([meta.lon_min, meta.lat_min], dtype=DTYPE)
    span = np.array([meta.lon_max - meta.lon_min, meta.lat_max - meta.lat_min], dtype=DTYPE)
    return low + (scaled + 1.0) * span / 2.0


def split_train_val(
    records: Sequence[FingerprintRecord],
    ratio: float = 0.9,
    seed: int = 0,
    building_count: int = 3,
    floor_count: int = 5,
    test: Optional[Sequence[FingerprintRecord]] = None,
) -> SplitDataset:
    """Seeded shuffle, then the first `ratio` share trains and the rest validates"""
    if not records:
        raise DatasetError("cannot split an empty record list")
    if len(records) < 10:
        raise DatasetError(f"need at least 10 records to split, got {len(records)}")
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"split ratio must lie in (0, 1), got {ratio}")

    order = SeededRng(seed).child("split").permutation(len(records))
    n_train = min(max(int(round(len(records) * ratio)), 1), len(records) - 1)
    train = [records[i] for i in order[:n_train]]
    validation = [records[i] for i in order[n_train:]]
    meta = DatasetMeta.from_records(train, building_count, floor_count)
    logger.info(f"🔀 Split {len(records)} records into {len(train)} train / {len(validation)} validation (seed {seed})")
    return SplitDataset(train, validation, list(test or []), meta, seed)


def features_and_targets(records: Sequence[FingerprintRecord]) -> FeatureSet:
    if not records:
        raise DatasetError("no records to convert")
    raw = np.stack([r.rssi for r in records])
    return FeatureSet(
        features=normalize_rssi(raw),
        building=np.array([r.building_id for r in records], dtype=DTYPE),
        floor=np.array([r.floor for r in records], dtype=DTYPE),
        xy=np.array([(r.longitude, r.latitude) for r in records], dtype=DTYPE),
    )


def synthesize_records(
    n: int,
    seed: int = 0,
    ap_count: int = AP_COUNT,
    building_count: int = 3,
    floor_count: int = 5,
    extent: float = 20.0,
    origin: Sequence[float] = (0.0, 0.0),
) -> List[FingerprintRecord]:
    """Noiseless fingerprints: AP b marks building b, AP (N + f) marks floor f, and the
    next four APs carry the coordinates linearly, rising and falling with x, then with y.
    Every other AP is absent"""
    needed = building_count + floor_count + 4
    if ap_count < needed:
        raise DatasetError(f"synthetic layout needs at least {needed} APs, got {ap_count}")
    if n < 1:
        raise DatasetError(f"need at least one synthetic record, got {n}")

    rng = SeededRng(seed).child("synthesize")
    building = rng.generator.integers(0, building_count, size=n)
    floor = rng.generator.integers(0, floor_count, size=n)
    unit = rng.random((n, 2))

    rssi = np.full((n, ap_count), float(NOT_DETECTED), dtype=DTYPE)
    rows = np.arange(n)
    rssi[rows, building] = -40.0
    rssi[rows, building_count + floor] = -40.0
    first = building_count + floor_count
    for axis in range(2):
        rssi[:, first + 2 * axis] = -100.0 + 90.0 * unit[:, axis]
        rssi[:, first + 2 * axis + 1] = -10.0 - 90.0 * unit[:, axis]

    records = []
    for i in range(n):
        records.append(FingerprintRecord(
            rssi=rssi[i],
            longitude=float(origin[0] + extent * unit[i, 0]),
            latitude=float(origin[1] + extent * unit[i, 1]),
            floor=int(floor[i]),
            building_id=int(building[i]),
            space_id=0,
            relative_position=1,
            user_id=0,
            phone_id=0,
            timestamp=1371700000 + i,
        ))
    return records
