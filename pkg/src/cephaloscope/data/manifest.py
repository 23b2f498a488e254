"""Sample records, manifests and age computation."""

from __future__ import annotations

import csv
import datetime as dt
import enum
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Iterator

MIN_AGE = 4.0
MAX_AGE = 40.0
MANIFEST_HEADER = ("path", "age", "gender", "orientation")


class DataError(ValueError):
    """Malformed or inadmissible corpus data."""


class Gender(enum.IntEnum):
    MALE = 0
    FEMALE = 1


class Orientation(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


def round_hundredths(x: float) -> float:
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def compute_age(birth_date, photo_date) -> float:
    """Chronological age in years: elapsed days / 365.25, to the nearest hundredth."""
    if photo_date < birth_date:
        raise DataError(f"photo date {photo_date} precedes birth date {birth_date}")
    delta = photo_date - birth_date
    days = delta.total_seconds() / 86400.0 if isinstance(delta, dt.timedelta) else float(delta)
    return round_hundredths(days / 365.25)


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    age: float
    gender: Gender
    orientation: Orientation = Orientation.LEFT

    def __post_init__(self):
        object.__setattr__(self, "gender", Gender(int(self.gender)))
        object.__setattr__(self, "orientation", Orientation(self.orientation))
        age = round_hundredths(self.age)
        if age != float(self.age):
            raise DataError(f"age {self.age!r} has more than two decimals")
        if not MIN_AGE <= age <= MAX_AGE:
            raise DataError(f"age {age} outside admissible range [{MIN_AGE}, {MAX_AGE}]")
        object.__setattr__(self, "age", age)

    @property
    def sample_id(self) -> str:
        return Path(self.image_path).stem

    @property
    def age_stratum(self) -> int:
        return int(self.age // 1)

    def to_row(self) -> list[str]:
        return [self.image_path, f"{self.age:.2f}", str(int(self.gender)), self.orientation.value]


def _parse_gender(text: str) -> Gender:
    t = text.strip().lower()
    if t in ("0", "male", "m"):
        return Gender.MALE
    if t in ("1", "female", "f"):
        return Gender.FEMALE
    raise DataError(f"unrecognised gender {text!r}")


class Manifest:
    """Immutable, ordered collection of sample records.

    ``root`` is the directory relative image paths resolve against.
    """

    def __init__(self, records: Iterable[SampleRecord] = (), root: str | Path | None = None):
        self._records = tuple(records)
        self.root = Path(root) if root is not None else None

    def __len__(self):
        return len(self._records)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    def __eq__(self, other):
        return isinstance(other, Manifest) and self._records == other._records

    @property
    def records(self) -> tuple[SampleRecord, ...]:
        return self._records

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def strata(self) -> dict[int, list[SampleRecord]]:
        out: dict[int, list[SampleRecord]] = {}
        for r in self._records:
            out.setdefault(r.age_stratum, []).append(r)
        return dict(sorted(out.items()))

    def with_records(self, records: Iterable[SampleRecord]) -> "Manifest":
        return Manifest(records, self.root)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest:
            w.writerow(r.to_row())


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != MANIFEST_HEADER:
        raise DataError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            records.append(SampleRecord(row[0], float(row[1]), _parse_gender(row[2]), row[3].strip().lower()))
        except (ValueError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return Manifest(records, root=path.parent)
