"""Binary and JSON file formats shared across the package.

Three container formats live here:

- tensor blobs: magic ``PHT1``, dtype code u8 (0 = f32, 1 = f64), ndim u8,
  dims as u64 little-endian, then the raw little-endian values (row-major);
- restart state files: magic ``PHRS`` followed by per-cell pool vectors in a
  fixed order, little-endian f32;
- model files: magic ``PHM1``, a length-prefixed JSON manifest, then one
  tensor blob per parameter in manifest order.

All writers go through a temp-file + rename so consumers never observe a
partially written file.
"""

import json
import os
import struct

import numpy as np

from .errors import CompletenessError, ContractError

BLOB_MAGIC = b"PHT1"
RESTART_MAGIC = b"PHRS"
MODEL_MAGIC = b"PHM1"
RESTART_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: "<f4", 1: "<f8"}

# Per-cell vector order inside a restart file.
RESTART_POOLS = ("deadcrootc", "deadstemc", "tlai", "cwdc", "soil3c", "soil4c")


# ---------------------------------------------------------------------------
# Atomic write helpers
# ---------------------------------------------------------------------------

def atomic_write_bytes(path, data):
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_json(path, obj):
    """Write JSON with sorted keys and a stable layout (byte-reproducible)."""
    text = json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": "))
    atomic_write_bytes(path, text.encode("utf-8") + b"\n")


def load_json(path):
    with open(path, "rb") as fh:
        return json.loads(fh.read().decode("utf-8"))


# ---------------------------------------------------------------------------
# Tensor blobs
# ---------------------------------------------------------------------------

def tensor_bytes(arr):
    """Encode one array as a PHT1 blob."""
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ContractError(f"tensor blobs hold float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ContractError("tensor rank exceeds format limit")
    header = BLOB_MAGIC + struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + dims + np.ascontiguousarray(arr).astype(_CODE_DTYPES[code]).tobytes()


def write_tensor(fh, arr):
    fh.write(tensor_bytes(arr))


def read_tensor(fh):
    """Decode the next PHT1 blob from a binary stream."""
    magic = fh.read(4)
    if magic != BLOB_MAGIC:
        raise ContractError(f"bad tensor blob magic {magic!r}")
    head = fh.read(2)
    if len(head) != 2:
        raise ContractError("truncated tensor blob header")
    code, ndim = struct.unpack("<BB", head)
    if code not in _CODE_DTYPES:
        raise ContractError(f"unknown tensor dtype code {code}")
    raw_dims = fh.read(8 * ndim)
    if len(raw_dims) != 8 * ndim:
        raise ContractError("truncated tensor blob dims")
    dims = struct.unpack(f"<{ndim}Q", raw_dims) if ndim else ()
    dtype = np.dtype(_CODE_DTYPES[code])
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ContractError("truncated tensor blob payload")
    arr = np.frombuffer(payload, dtype=dtype)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def save_blob(path, arr):
    atomic_write_bytes(path, tensor_bytes(arr))


def load_blob(path):
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise ContractError(f"trailing bytes after tensor blob in {path}")
    return arr


def save_blob_sequence(path, arrays):
    """Write several blobs back-to-back; order is the caller's contract."""
    atomic_write_bytes(path, b"".join(tensor_bytes(a) for a in arrays))


def load_blob_sequence(path):
    out = []
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        while fh.tell() < size:
            out.append(read_tensor(fh))
    return out


# ---------------------------------------------------------------------------
# Restart state files
# ---------------------------------------------------------------------------

def restart_bytes(cell_ids, pools, n_pft, n_layers):
    cell_ids = np.asarray(cell_ids)
    n_cells = cell_ids.shape[0]
    widths = {"deadcrootc": n_pft, "deadstemc": n_pft, "tlai": n_pft,
              "cwdc": n_layers, "soil3c": n_layers, "soil4c": n_layers}
    missing = [name for name in RESTART_POOLS if name not in pools]
    if missing:
        raise CompletenessError(f"restart state missing pools: {', '.join(missing)}")
    for name in RESTART_POOLS:
        arr = np.asarray(pools[name])
        if arr.shape != (n_cells, widths[name]):
            raise ContractError(
                f"restart pool {name} has shape {arr.shape}, expected {(n_cells, widths[name])}")
    head = RESTART_MAGIC + struct.pack("<BBBQ", RESTART_VERSION, n_pft, n_layers, n_cells)
    parts = [head]
    for i in range(n_cells):
        parts.append(struct.pack("<Q", int(cell_ids[i])))
        for name in RESTART_POOLS:
            parts.append(np.asarray(pools[name][i], dtype="<f4").tobytes())
    return b"".join(parts)


def write_restart(path, cell_ids, pools, n_pft, n_layers):
    atomic_write_bytes(path, restart_bytes(cell_ids, pools, n_pft, n_layers))


def read_restart(path):
    """Returns (cell_ids int array, pools dict of [n_cells, width] f32, n_pft, n_layers)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RESTART_MAGIC:
            raise ContractError(f"bad restart file magic {magic!r}")
        version, n_pft, n_layers, n_cells = struct.unpack("<BBBQ", fh.read(11))
        if version != RESTART_VERSION:
            raise ContractError(f"unsupported restart file version {version}")
        widths = {"deadcrootc": n_pft, "deadstemc": n_pft, "tlai": n_pft,
                  "cwdc": n_layers, "soil3c": n_layers, "soil4c": n_layers}
        cell_ids = np.empty(n_cells, dtype=np.int64)
        pools = {name: np.empty((n_cells, widths[name]), dtype=np.float32)
                 for name in RESTART_POOLS}
        record = 8 + 4 * sum(widths[name] for name in RESTART_POOLS)
        for i in range(n_cells):
            raw = fh.read(record)
            if len(raw) != record:
                raise ContractError("truncated restart file")
            cell_ids[i] = struct.unpack_from("<Q", raw, 0)[0]
            off = 8
            for name in RESTART_POOLS:
                w = widths[name]
                pools[name][i] = np.frombuffer(raw, dtype="<f4", count=w, offset=off)
                off += 4 * w
        if fh.read(1):
            raise ContractError("trailing bytes after restart records")
    return cell_ids, pools, n_pft, n_layers


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def write_model_file(path, manifest, arrays):
    """Manifest must carry a "params" name list; ``arrays`` maps each name to
    its tensor.  Blobs are written in manifest order."""
    names = manifest.get("params")
    if names is None:
        raise ContractError("model manifest lacks a params list")
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CompletenessError(f"model arrays missing: {', '.join(missing)}")
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<I", len(blob)), blob]
    parts.extend(tensor_bytes(arrays[name]) for name in names)
    atomic_write_bytes(path, b"".join(parts))


def read_model_file(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise ContractError(f"bad model file magic {magic!r}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        arrays = {name: read_tensor(fh) for name in manifest["params"]}
        if fh.read(1):
            raise ContractError("trailing bytes after model parameters")
    return manifest, arrays
