"""QVT1 binary tensor files and parameter checkpoints.

Layout of a ``.qvt`` file: magic ``QVT1``, u32 LE rank, rank x u32 LE
dims, then the row-major float32 LE payload. A checkpoint directory holds
one ``.qvt`` per parameter plus ``manifest.json`` mapping each parameter
name to ``{"file": ..., "shape": [...]}``.
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QVT1"


class CheckpointError(RuntimeError):
    pass


def encode_tensor(array):
    array = np.asarray(array)
    header = MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensor(buf):
    if buf[:4] != MAGIC:
        raise ValueError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = buf[offset:]
    if len(payload) != 4 * count:
        raise ValueError(f"payload holds {len(payload)} bytes, shape {tuple(dims)} needs {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path):
    return decode_tensor(Path(path).read_bytes())


def _file_name(name):
    return name.replace("/", "_") + ".qvt"


def save_checkpoint(directory, state):
    """Write ``state`` (name -> array) as a checkpoint directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, array in state.items():
        fname = _file_name(name)
        save_tensor(directory / fname, array)
        manifest[name] = {"file": fname, "shape": list(np.shape(array))}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {mpath}: {exc}") from exc
    state = {}
    for name, entry in manifest.items():
        if not isinstance(entry, dict) or "file" not in entry or "shape" not in entry:
            raise CheckpointError(f"manifest entry for tensor '{name}' is malformed")
        fpath = directory / entry["file"]
        if not fpath.exists():
            raise CheckpointError(f"missing tensor '{name}' (file {entry['file']})")
        array = load_tensor(fpath)
        if list(array.shape) != list(entry["shape"]):
            raise CheckpointError(
                f"tensor '{name}' has shape {list(array.shape)}, manifest says {entry['shape']}"
            )
        state[name] = array
    return state
