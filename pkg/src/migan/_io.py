"""Small I/O and seeding helpers used across the package."""

import io
import json
import zipfile
import zlib
from pathlib import Path

import numpy as np

# Fixed zip timestamp so identical arrays always produce identical bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_npz(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray) to ``path`` byte-reproducibly.

    ``meta`` is stored as a JSON document under the reserved name
    ``__meta__``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        if meta is not None:
            info = zipfile.ZipInfo("__meta__.json", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]),
                                      allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_npz(path):
    """Inverse of :func:`save_npz`; returns ``(arrays, meta)``."""
    arrays, meta = {}, None
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == "__meta__.json":
                meta = json.loads(data)
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(
                    io.BytesIO(data), allow_pickle=False)
    return arrays, meta


def derive_seed(seed, stream):
    """Fan a root seed out to an independent named sub-stream seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
