"""Atomic file output and a byte-reproducible npz container."""

from __future__ import annotations

import contextlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _atomic_write(path, writer, mode: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            writer(fh)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    _atomic_write(path, lambda fh: fh.write(text), "w")


def atomic_write_bytes(path, payload: bytes) -> None:
    _atomic_write(path, lambda fh: fh.write(payload), "wb")


def write_csv(path, header: list[str], rows) -> None:
    """Rows of str/float; floats rendered with 6 significant digits."""

    def cell(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.6g}"
        return str(v)

    lines = [",".join(header)]
    lines += [",".join(cell(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays (little-endian) and a JSON header into a deterministic zip."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype.kind == "f":
                arr = arr.astype("<f8")
            elif arr.dtype.kind in "iu":
                arr = arr.astype("<i8")
            elif arr.dtype.kind == "b":
                arr = arr.astype("|b1")
            elif arr.dtype.kind == "U":
                arr = arr.astype(f"<U{max(1, arr.dtype.itemsize // 4)}")
            item = io.BytesIO()
            np.lib.format.write_array(item, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), item.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, meta
