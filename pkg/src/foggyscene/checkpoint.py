"""Versioned checkpoint container with byte-reproducible writes.

A checkpoint is a STORED zip holding one ``meta.json`` (format tag, version,
arbitrary JSON metadata) plus one ``.npy`` entry per array. Entries are
written in sorted order with fixed timestamps, so saving the same state twice
produces identical bytes, and a save -> load -> save round trip is the
identity on the file.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_TAG = "foggyscene.checkpoint"
VERSION = 1

_META_ENTRY = "meta.json"
_ARRAY_PREFIX = "arrays/"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path: Path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Write metadata and named arrays; deterministic for identical inputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT_TAG, "version": VERSION, "meta": meta}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo(_META_ENTRY, date_time=_EPOCH)
        zf.writestr(info, json.dumps(header, sort_keys=True))
        for key in sorted(arrays):
            buf = io.BytesIO()
            # note: ascontiguousarray would promote 0-dim arrays to 1-dim
            np.lib.format.write_array(buf, np.asarray(arrays[key]))
            info = zipfile.ZipInfo(_ARRAY_PREFIX + key + ".npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
    return path


def load_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint back as (meta, arrays)."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read(_META_ENTRY))
            if header.get("format") != FORMAT_TAG:
                raise FormatError(f"{path} is not a {FORMAT_TAG} file")
            version = header.get("version")
            if version != VERSION:
                raise FormatError(
                    f"checkpoint version {version} in {path} is unsupported; "
                    f"this build reads version {VERSION}"
                )
            arrays = {}
            for name in zf.namelist():
                if name.startswith(_ARRAY_PREFIX) and name.endswith(".npy"):
                    key = name[len(_ARRAY_PREFIX) : -len(".npy")]
                    arrays[key] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
            return header["meta"], arrays
    except FormatError:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, EOFError) as exc:
        raise FormatError(f"corrupt or truncated checkpoint {path}: {exc}") from exc
