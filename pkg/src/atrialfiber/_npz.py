"""Byte-reproducible ``.npz`` writing."""

from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np


def npz_bytes(arrays: dict) -> bytes:
    """``.npz`` archive with sorted members and fixed timestamps, so equal arrays give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arrays[name], order="C"), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, member.getvalue())
    return buf.getvalue()


def write_npz(path, arrays: dict) -> None:
    Path(path).write_bytes(npz_bytes(arrays))
