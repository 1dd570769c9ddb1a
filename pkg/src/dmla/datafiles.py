"""On-disk formats: raw listing NDJSON, dataset directories, guess files.

A dataset directory holds ``table.csv`` (columns ``id, y, d[, y_guess,
d_guess], x_0 .. x_{p-1}``) and ``meta.json``. Floats are written with
``repr`` so a write/read round trip is exact.
"""

from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from dmla import __version__
from dmla.data_model import ObservationTable
from dmla.dml import table_fingerprint
from dmla.errors import DataValidationError
from dmla.preprocess import RawListing

DATASET_FORMAT = "dmla-dataset/1"
TABLE_FILE = "table.csv"
META_FILE = "meta.json"


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(obj), encoding="utf-8")
    return path


def read_listings(path) -> list[RawListing]:
    """Parse one RawListing per non-blank line; errors name the line number."""
    listings = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(data, dict):
                raise DataValidationError(f"{path}:{lineno}: expected a JSON object")
            try:
                listing = RawListing.from_dict(data)
                _check_listing_types(listing)
            except (DataValidationError, TypeError, ValueError) as exc:
                raise DataValidationError(f"{path}:{lineno}: {exc}") from exc
            listings.append(listing)
    if not listings:
        raise DataValidationError(f"{path}: no listings")
    return listings


def _check_listing_types(lst: RawListing):
    if not isinstance(lst.price, (int, float)) or isinstance(lst.price, bool):
        raise DataValidationError(f"price must be a number, got {lst.price!r}")
    if not isinstance(lst.feedback_score, int) or isinstance(lst.feedback_score, bool):
        raise DataValidationError(f"feedback_score must be an integer, got {lst.feedback_score!r}")
    if not isinstance(lst.image_embeddings, list) or not all(isinstance(v, list) for v in lst.image_embeddings):
        raise DataValidationError("image_embeddings must be a list of numeric arrays")


def write_listings(path, listings) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for lst in listings:
            fh.write(json.dumps(lst.to_dict(), ensure_ascii=False) + "\n")
    return path


def write_dataset(directory, table: ObservationTable, meta: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = ["id", "y", "d"]
    cols = [table.y, table.d]
    if table.has_guesses:
        header += ["y_guess", "d_guess"]
        cols += [table.y_guess, table.d_guess]
    header += [f"x_{j}" for j in range(table.p)]
    with (directory / TABLE_FILE).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(table.n):
            row = [table.ids[i]] + [repr(float(c[i])) for c in cols] + [repr(float(v)) for v in table.x[i]]
            writer.writerow(row)
    full_meta = {
        "format": DATASET_FORMAT,
        "tool_version": __version__,
        "n": table.n,
        "p": table.p,
        "has_guesses": table.has_guesses,
        "data_fingerprint": table_fingerprint(table),
        **(meta or {}),
    }
    write_json(directory / META_FILE, full_meta)
    return directory


def read_dataset(directory) -> tuple[ObservationTable, dict]:
    directory = Path(directory)
    table_path = directory / TABLE_FILE
    if not table_path.is_file():
        raise DataValidationError(f"{directory}: missing {TABLE_FILE}")
    meta_path = directory / META_FILE
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
    with table_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{table_path}: empty file") from None
        if header[:3] != ["id", "y", "d"]:
            raise DataValidationError(f"{table_path}: header must start with id,y,d")
        has_guess = header[3:5] == ["y_guess", "d_guess"]
        first_x = 5 if has_guess else 3
        xcols = header[first_x:]
        if xcols != [f"x_{j}" for j in range(len(xcols))]:
            raise DataValidationError(f"{table_path}: feature columns must be x_0..x_{{p-1}}")
        ids, nums = [], []
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataValidationError(f"{table_path}:{rowno}: {len(row)} fields, expected {len(header)}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataValidationError(f"{table_path}:{rowno}: {exc}") from exc
            bad = [header[1 + k] for k, v in enumerate(vals) if not math.isfinite(v)]
            if bad:
                raise DataValidationError(f"{table_path}:{rowno}: non-finite value in {bad[0]}")
            ids.append(row[0])
            nums.append(vals)
    if not nums:
        raise DataValidationError(f"{table_path}: no rows")
    arr = np.array(nums)
    table = ObservationTable(
        y=arr[:, 0],
        d=arr[:, 1],
        x=arr[:, first_x - 1 :],
        ids=ids,
        y_guess=arr[:, 2] if has_guess else None,
        d_guess=arr[:, 3] if has_guess else None,
    )
    return table.validate(), meta


GUESS_COLUMNS = ("id", "kind", "value", "attempts", "model_id")


def write_guesses(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GUESS_COLUMNS)
        for rec in records:
            d = rec.to_dict()
            writer.writerow([d[c] for c in GUESS_COLUMNS])
    return path


def read_guesses(path) -> dict:
    """Map listing id to guessed value."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "value"} <= set(reader.fieldnames):
            raise DataValidationError(f"{path}: guesses file needs id and value columns")
        for rowno, row in enumerate(reader, start=2):
            try:
                value = float(row["value"])
            except ValueError as exc:
                raise DataValidationError(f"{path}:{rowno}: bad value {row['value']!r}") from exc
            if row["id"] in out:
                raise DataValidationError(f"{path}:{rowno}: duplicate id {row['id']!r}")
            out[row["id"]] = value
    return out


def bundled_path(name: str) -> Path:
    """Path of a file or directory shipped in ``dmla/data``."""
    return Path(str(resources.files("dmla") / "data" / name))
