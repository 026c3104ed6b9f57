"""
On-disk formats.

Volumes and projections are raw float32 little-endian scalars, x fastest,
with a JSON sidecar. Projections live in one directory as proj_0001.raw ...
(1-based view index) plus projections.json with shape, poses and photon
settings. Checkpoints are a versioned binary container of named float64
tensors with the model and training configuration echoed as JSON.
"""

import json
from pathlib import Path
import struct

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import sparse

from cbct_lab.config import (
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION, MU_WATER, PROJECTION_NAME, PROJECTION_SIDECAR,
)
from cbct_lab.errors import FileFormatError, ShapeMismatchError
from cbct_lab.geometry import ViewPose
from cbct_lab.network import ModelConfig, ModelState
from cbct_lab.projector import ProjectionStack
from cbct_lab.volume import ImageGrid, Volume

RAW_DTYPE = "<f4"
RAW_ORDER = "x-fastest"


def _sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise FileFormatError(f"missing sidecar {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"unreadable sidecar {path}: {exc.msg} (line {exc.lineno})") from exc


def _raw_bytes(array: np.ndarray) -> bytes:
    """(C, *spatial) -> bytes with the first spatial axis fastest."""
    order = (0,) + tuple(range(array.ndim - 1, 0, -1))
    return np.ascontiguousarray(array.transpose(order)).astype(RAW_DTYPE).tobytes()


def _from_raw(buffer: bytes, shape, channels, source) -> np.ndarray:
    expected = int(np.prod(shape)) * channels * 4
    if len(buffer) != expected:
        raise FileFormatError(
            f"{source}: {len(buffer)} bytes on disk, sidecar shape {tuple(shape)} x {channels} "
            f"channel(s) needs {expected}")
    flat = np.frombuffer(buffer, dtype=RAW_DTYPE).astype(np.float64)
    data = flat.reshape((channels,) + tuple(reversed(shape)))
    order = (0,) + tuple(range(data.ndim - 1, 0, -1))
    return data.transpose(order)


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------

def write_volume(vol: Volume, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_raw_bytes(vol.data))
    sidecar = {"shape": list(vol.shape), "spacing": list(vol.spacing), "channels": vol.channels,
               "dtype": RAW_DTYPE, "order": RAW_ORDER}
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def read_volume(path) -> Volume:
    path = Path(path)
    meta = _read_json(_sidecar_path(path))
    if not path.exists():
        raise FileFormatError(f"missing volume file {path}")
    try:
        shape, spacing = tuple(meta["shape"]), tuple(meta["spacing"])
        channels = int(meta.get("channels", 1))
    except KeyError as exc:
        raise FileFormatError(f"sidecar {_sidecar_path(path)} lacks {exc.args[0]!r}") from exc
    if len(shape) != 3:
        raise FileFormatError(f"volume sidecar shape must have 3 entries, got {shape}")
    return Volume(_from_raw(path.read_bytes(), shape, channels, path), spacing)


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def write_projections(stack: ProjectionStack, directory, photon=None):
    """photon: optional dict of simulation settings (i0, i1, log_eps, seed, below_dark) echoed in the sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, img in enumerate(stack.images, start=1):
        name = PROJECTION_NAME.format(i)
        (directory / name).write_bytes(_raw_bytes(img.data))
        files.append(name)
    sidecar = {
        "n_views": len(stack),
        "detector_shape": list(stack.detector_shape),
        "dtype": RAW_DTYPE,
        "order": RAW_ORDER,
        "files": files,
        "poses": [pose.as_dict() for pose in stack.poses],
    }
    if photon is not None:
        sidecar["photon"] = photon
    (directory / PROJECTION_SIDECAR).write_text(json.dumps(sidecar, indent=2) + "\n")


def read_projections(directory) -> ProjectionStack:
    directory = Path(directory)
    meta = _read_json(directory / PROJECTION_SIDECAR)
    try:
        n_views, shape = int(meta["n_views"]), tuple(meta["detector_shape"])
        poses_meta = meta["poses"]
    except KeyError as exc:
        raise FileFormatError(f"projection sidecar lacks {exc.args[0]!r}") from exc
    if len(poses_meta) != n_views:
        raise FileFormatError(f"sidecar lists {len(poses_meta)} poses for {n_views} views")

    poses, images = [], []
    for i in range(1, n_views + 1):
        path = directory / PROJECTION_NAME.format(i)
        if not path.exists():
            raise FileFormatError(f"missing view {i}: {path}")
        images.append(ImageGrid(_from_raw(path.read_bytes(), shape, 1, path)))
        p = poses_meta[i - 1]
        poses.append(ViewPose.from_vectors(p["source"], p["detector_center"], p["u"], p["v"], shape))
    try:
        return ProjectionStack(poses, images)
    except ShapeMismatchError as exc:
        raise FileFormatError(str(exc)) from exc


def read_photon_settings(directory) -> dict | None:
    return _read_json(Path(directory) / PROJECTION_SIDECAR).get("photon")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _pack_tensor(name: str, value: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", value.ndim)
    header += struct.pack(f"<{value.ndim}I", *value.shape)
    return header + np.ascontiguousarray(value, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, buffer, source):
        self.buffer, self.offset, self.source = buffer, 0, source

    def take(self, n):
        if self.offset + n > len(self.buffer):
            raise FileFormatError(f"{self.source}: checkpoint truncated at byte {self.offset}")
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self):
        (length,) = self.unpack("<H")
        name = self.take(length).decode("utf-8")
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape))
        value = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, value


def save_checkpoint(path, state: ModelState, model_cfg: ModelConfig, train_cfg=None):
    """Parameters, Adam moments and step counter; configs echoed as JSON."""
    config = {"model": model_cfg.to_dict(),
              "train": train_cfg.to_dict() if train_cfg is not None else None}
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    tensors = [(name, value) for name, value in state.params.items()]
    tensors += [(f"adam.m.{name}", state.m[name]) for name in state.params]
    tensors += [(f"adam.v.{name}", state.v[name]) for name in state.params]

    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<I", len(config_bytes)), config_bytes,
           struct.pack("<QI", state.step, len(tensors))]
    out += [_pack_tensor(name, value) for name, value in tensors]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(out))


def load_checkpoint(path):
    """Returns (ModelState, ModelConfig, train config dict or None)."""
    path = Path(path)
    if not path.exists():
        raise FileFormatError(f"missing checkpoint {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path} is not a checkpoint")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
    (config_length,) = reader.unpack("<I")
    config = json.loads(reader.take(config_length).decode("utf-8"))
    step, count = reader.unpack("<QI")

    params, m, v = {}, {}, {}
    for _ in range(count):
        name, value = reader.tensor()
        if name.startswith("adam.m."):
            m[name[len("adam.m."):]] = value
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = value
        else:
            params[name] = value
    if reader.offset != len(reader.buffer):
        raise FileFormatError(f"{path}: {len(reader.buffer) - reader.offset} trailing bytes")
    state = ModelState(params, m, v, int(step))
    return state, ModelConfig.from_dict(config["model"]), config.get("train")


# ---------------------------------------------------------------------------
# Display export
# ---------------------------------------------------------------------------

def to_hounsfield(values, mu_water=MU_WATER):
    """Display-only HU map."""
    return 1000.0 * (np.asarray(values) - mu_water) / mu_water


def window_slice(vol: Volume, axis=2, index=None, window=None, hu=False) -> np.ndarray:
    """8-bit slice through the volume with an affine display window (lo, hi)."""
    values = vol.values
    index = values.shape[axis] // 2 if index is None else index
    if not 0 <= index < values.shape[axis]:
        raise IndexError(f"slice {index} out of range for axis {axis} of size {values.shape[axis]}")
    image = np.take(values, index, axis=axis)
    if hu:
        image = to_hounsfield(image)
    lo, hi = (float(image.min()), float(image.max())) if window is None else window
    if not hi > lo:
        return np.zeros(image.shape, dtype=np.uint8)
    scaled = np.clip((image - lo) / (hi - lo), 0.0, 1.0)
    return np.rint(255.0 * scaled).astype(np.uint8)


def export_slice_png(vol: Volume, path, axis=2, index=None, window=None, hu=False) -> np.ndarray:
    image = window_slice(vol, axis, index, window, hu)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # rows of the PNG follow the second in-plane axis
    plt.imsave(path, image.T, cmap="gray", vmin=0, vmax=255, origin="lower")
    return image


# ---------------------------------------------------------------------------
# System matrices
# ---------------------------------------------------------------------------

MATRIX_NAME = "view_{:04d}.npz"
MATRIX_SIDECAR = "matrices.json"


def save_view_matrices(matrices, directory, volume_shape, volume_spacing, step):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, matrix in enumerate(matrices, start=1):
        sparse.save_npz(directory / MATRIX_NAME.format(i), matrix.tocsr())
    meta = {"n_views": len(matrices), "volume_shape": list(volume_shape),
            "volume_spacing": list(volume_spacing), "step": step}
    (directory / MATRIX_SIDECAR).write_text(json.dumps(meta, indent=2) + "\n")


def load_view_matrices(directory, n_views, volume_shape, detector_shape):
    """Per-view DRR matrices written by save_view_matrices, checked against the geometry."""
    directory = Path(directory)
    meta = _read_json(directory / MATRIX_SIDECAR)
    if int(meta["n_views"]) != n_views or tuple(meta["volume_shape"]) != tuple(volume_shape):
        raise FileFormatError(
            f"{directory} holds {meta['n_views']} matrices for volume {tuple(meta['volume_shape'])}, "
            f"need {n_views} for {tuple(volume_shape)}")
    expected = (int(np.prod(detector_shape)), int(np.prod(volume_shape)))
    matrices = []
    for i in range(1, n_views + 1):
        path = directory / MATRIX_NAME.format(i)
        if not path.exists():
            raise FileFormatError(f"missing system matrix for view {i}: {path}")
        matrix = sparse.load_npz(path).tocsr()
        if matrix.shape != expected:
            raise FileFormatError(f"{path}: shape {matrix.shape}, expected {expected}")
        matrices.append(matrix)
    return matrices
