"""
Artifact writers: training report CSV, pooled-feature CSV and attention /
distance maps as CSV (row, col, value) plus binary PGM heatmaps.
"""

import csv
import io
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from models.schemas import TrainReportRow
from services import file_service
from services.errors import ContractError, DataFormatError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch", "train_loss", "eval_loss", "eval_acc", "lr", "seconds")


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_train_report(path: str | Path, rows: Sequence[TrainReportRow]) -> Path:
    body = [[getattr(row, col) for col in REPORT_COLUMNS] for row in rows]
    return file_service.write_text_atomic(path, _csv_text(REPORT_COLUMNS, body))


def read_train_report(path: str | Path) -> list[TrainReportRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [TrainReportRow.model_validate(row) for row in csv.DictReader(fh)]


def write_features(path: str | Path, labels: np.ndarray, features: np.ndarray) -> Path:
    """One row per sample: label, f0, f1, …"""
    if len(labels) != len(features):
        raise ContractError(f"{len(labels)} labels for {len(features)} feature rows")
    header = ["label"] + [f"f{i}" for i in range(features.shape[1])]
    body = ([int(label)] + [repr(float(v)) for v in row] for label, row in zip(labels, features))
    out = file_service.write_text_atomic(path, _csv_text(header, body))
    logger.info("wrote %d feature rows to %s", len(labels), out)
    return out


def _check_map(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ContractError(f"maps are exported one 2-D slice at a time, got shape {values.shape}")
    return values


def map_csv_text(values: np.ndarray) -> str:
    values = _check_map(values)
    rows = ([i, j, repr(float(values[i, j]))] for i in range(values.shape[0]) for j in range(values.shape[1]))
    return _csv_text(("row", "col", "value"), rows)


def quantize(values: np.ndarray) -> np.ndarray:
    """Min–max normalise to 0..255; a constant map becomes all zeros."""
    values = _check_map(values)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def pgm_bytes(values: np.ndarray) -> bytes:
    pixels = quantize(values)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def write_map(directory: str | Path, stem: str, values: np.ndarray) -> tuple[Path, Path]:
    """Write `<stem>.csv` and `<stem>.pgm` for one 2-D map."""
    directory = file_service.ensure_dir(directory)
    csv_path = file_service.write_text_atomic(directory / f"{stem}.csv", map_csv_text(values))
    pgm_path = file_service.write_bytes_atomic(directory / f"{stem}.pgm", pgm_bytes(values))
    return csv_path, pgm_path


def read_pgm(path: str | Path) -> np.ndarray:
    data = file_service.read_bytes(path)
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise DataFormatError(f"{path} is not an 8-bit binary PGM")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
