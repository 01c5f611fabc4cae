"""Binary format helpers shared by the on-disk formats."""
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ValidationError

DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def dtype_code(dtype) -> int:
    return DTYPE_CODES[np.dtype(dtype).newbyteorder("<")]


def code_dtype(code: int) -> np.dtype:
    try:
        return CODE_DTYPES[code]
    except KeyError:
        raise ValidationError(f"unknown dtype code {code}") from None


def as_float_dtype(spec) -> np.dtype:
    """Accept ``32``/``64``/``"float32"``/numpy dtypes."""
    if spec in (32, "32"):
        spec = np.float32
    elif spec in (64, "64"):
        spec = np.float64
    dt = np.dtype(spec)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValidationError(f"dtype must be float32 or float64, got {dt}")
    return dt


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
