"""Query-product records and the tab-separated dataset file format."""

from __future__ import annotations

import csv
import io
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from esci_rank.labels import EsciLabel, check_label_vector

LOCALES = ("en", "es", "jp")

COLUMNS = (
    "query_id",
    "product_id",
    "query",
    "product_title",
    "product_description",
    "product_bullet_point",
    "product_brand",
    "product_color_name",
    "product_locale",
    "esci_label",
    "soft_e",
    "soft_s",
    "soft_c",
    "soft_i",
)
SOFT_COLUMNS = COLUMNS[-4:]
REQUIRED_COLUMNS = COLUMNS[:9]


class DatasetError(ValueError):
    """Malformed dataset content; ``line`` is the 1-based file line when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class QueryProductRecord:
    query_id: str
    product_id: str
    query: str
    title: str = ""
    description: str = ""
    bullet_points: str = ""
    brand: str = ""
    color: str = ""
    locale: str = "en"
    label: Optional[EsciLabel] = None
    soft_label: Optional[tuple] = field(default=None)

    def __post_init__(self) -> None:
        if not self.query_id or not self.product_id:
            raise DatasetError("query_id and product_id must be non-empty")
        if self.locale not in LOCALES:
            raise DatasetError(f"unknown locale {self.locale!r} (expected one of {LOCALES})")
        if self.soft_label is not None:
            soft = tuple(float(x) for x in self.soft_label)
            check_label_vector(np.array(soft))
            object.__setattr__(self, "soft_label", soft)

    @property
    def key(self) -> tuple[str, str]:
        return (self.query_id, self.product_id)

    def with_soft_label(self, p: Sequence[float]) -> "QueryProductRecord":
        return replace(self, soft_label=tuple(float(x) for x in p))


Dataset = list  # list[QueryProductRecord]; treated as immutable once built


def check_unique(records: Iterable[QueryProductRecord]) -> None:
    seen = set()
    for r in records:
        if r.key in seen:
            raise DatasetError(f"duplicate (query_id, product_id) {r.key}")
        seen.add(r.key)


def group_by_query(records: Iterable[QueryProductRecord]) -> dict[str, list[QueryProductRecord]]:
    groups: dict[str, list[QueryProductRecord]] = {}
    for r in records:
        groups.setdefault(r.query_id, []).append(r)
    return groups


def _row(record: QueryProductRecord) -> list[str]:
    soft = ["", "", "", ""] if record.soft_label is None else [repr(x) for x in record.soft_label]
    row = [
        record.query_id,
        record.product_id,
        record.query,
        record.title,
        record.description,
        record.bullet_points,
        record.brand,
        record.color,
        record.locale,
        "" if record.label is None else record.label.value,
        *soft,
    ]
    for value in row:
        if "\t" in value or "\n" in value or "\r" in value:
            raise DatasetError(f"record {record.key} has a tab or newline inside a field; clean it first")
    return row


def write_dataset(records: Iterable[QueryProductRecord], stream: TextIO) -> None:
    writer = csv.writer(stream, delimiter="\t", quoting=csv.QUOTE_NONE, quotechar=None, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in records:
        writer.writerow(_row(r))


def save_dataset(records: Iterable[QueryProductRecord], path: Union[str, Path]) -> None:
    if str(path) == "-":
        write_dataset(records, sys.stdout)
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        write_dataset(records, f)


def _parse_row(values: dict[str, str], line: int) -> QueryProductRecord:
    label_text = values.get("esci_label", "")
    try:
        label = EsciLabel.parse(label_text) if label_text else None
    except ValueError as exc:
        raise DatasetError(str(exc), line) from None

    soft_raw = [values.get(c, "") for c in SOFT_COLUMNS]
    soft = None
    if any(soft_raw):
        if not all(soft_raw):
            raise DatasetError("soft label columns must be all filled or all empty", line)
        try:
            soft = tuple(float(x) for x in soft_raw)
            check_label_vector(np.array(soft))
        except ValueError as exc:
            raise DatasetError(f"bad soft label: {exc}", line) from None

    try:
        return QueryProductRecord(
            query_id=values["query_id"],
            product_id=values["product_id"],
            query=values["query"],
            title=values["product_title"],
            description=values["product_description"],
            bullet_points=values["product_bullet_point"],
            brand=values["product_brand"],
            color=values["product_color_name"],
            locale=values["product_locale"],
            label=label,
            soft_label=soft,
        )
    except DatasetError as exc:
        raise DatasetError(str(exc), line) from None


def read_dataset(stream: TextIO) -> list[QueryProductRecord]:
    reader = csv.reader(stream, delimiter="\t", quoting=csv.QUOTE_NONE, quotechar=None)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("empty file: header row missing", 1) from None
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise DatasetError(f"missing required columns: {', '.join(missing)}", 1)
    unknown = [c for c in header if c not in COLUMNS]
    if unknown:
        raise DatasetError(f"unknown columns: {', '.join(unknown)}", 1)

    records = []
    seen: dict[tuple[str, str], int] = {}
    for values in reader:
        line = reader.line_num
        if not values:
            continue
        if len(values) != len(header):
            raise DatasetError(f"expected {len(header)} fields, found {len(values)}", line)
        record = _parse_row(dict(zip(header, values)), line)
        if record.key in seen:
            raise DatasetError(f"duplicate (query_id, product_id) {record.key}, first seen on line {seen[record.key]}", line)
        seen[record.key] = line
        records.append(record)
    return records


def load_dataset(path: Union[str, Path]) -> list[QueryProductRecord]:
    if str(path) == "-":
        return read_dataset(sys.stdin)
    with open(path, encoding="utf-8", newline="") as f:
        return read_dataset(f)


def dumps(records: Iterable[QueryProductRecord]) -> str:
    buf = io.StringIO()
    write_dataset(records, buf)
    return buf.getvalue()
