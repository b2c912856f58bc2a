import logging
import os
import tempfile
from pathlib import Path

from services.errors import DataFormatError

logger = logging.getLogger(__name__)


def ensure_dir(path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def read_bytes(path: str | Path) -> bytes:
    """Read a whole input file; a missing or unreadable file is a data-format failure."""
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc.strerror or exc}") from exc


def write_bytes_atomic(path: str | Path, data: bytes) -> Path:
    """
    Write `data` to a temp file beside `path`, then rename it into place.
    Readers never observe a half-written checkpoint or CSV.
    """
    path = Path(path)
    ensure_dir(path.parent if str(path.parent) else ".")
    tmp_fd, tmp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(tmp_fd, "wb") as tmp:
            tmp.write(data)
        os.replace(tmp_path, path)
    except Exception:
        delete_file(tmp_path)
        raise
    return path


def write_text_atomic(path: str | Path, text: str) -> Path:
    return write_bytes_atomic(path, text.encode("utf-8"))


def delete_file(path: str | Path) -> None:
    """Drop a leftover temp file after a failed atomic write; a file already gone is fine."""
    try:
        os.remove(path)
    except FileNotFoundError:
        pass
    except OSError as exc:
        logger.warning("could not remove temp file %s: %s", path, exc)
