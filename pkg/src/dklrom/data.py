"""Trajectory datasets: in-memory container, on-disk layout, window sampling.

On-disk layout is a directory holding `meta.json` plus one binary file per
array. Each binary starts with a fixed header: the 8-byte magic "DKLROM1\\0",
a uint32 rank, a uint32 dtype code (1 = float32), and rank uint64 dimensions,
all little-endian, followed by the row-major payload. Round trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, ValidationError

MAGIC = b"DKLROM1\x00"
_DTYPE_CODES = {1: np.dtype("<f4")}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}
FORMAT_VERSION = 1


def write_array(path, arr: np.ndarray) -> None:
    """Write one array in the documented binary layout (float32 LE)."""
    # asarray, not ascontiguousarray: the latter silently promotes 0-d to 1-d
    arr = np.asarray(arr, dtype=np.dtype("<f4"), order="C")
    header = MAGIC + struct.pack("<II", arr.ndim, _CODE_FOR_DTYPE[np.dtype("<f4")])
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    """Read one array, validating magic, header consistency, and payload size."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise FormatError(f"{path}: file too short for a header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    rank, code = struct.unpack_from("<II", raw, len(MAGIC))
    if rank > 8:
        raise FormatError(f"{path}: implausible rank {rank}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    off = len(MAGIC) + 8
    if len(raw) < off + 8 * rank:
        raise FormatError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    if len(raw) - off != expected:
        raise FormatError(
            f"{path}: payload has {len(raw) - off} bytes, header promises {expected}"
        )
    return np.frombuffer(raw[off:], dtype=dtype).reshape(dims).copy()


@dataclass
class TrajectoryDataset:
    """Aligned trajectory arrays.

    measurements: (M, N, *frame_shape) float32 in [0, 1]
    controls:     (M, N-1, u_dim) float32 (u_dim may be 0)
    params:       (M, p_dim) float32 per-trajectory parameters (p_dim may be 0)
    states:       optional (M, N, s_dim) simulator states, evaluation-only
    meta:         generation record (system, frame timing, mappings, seed)
    """

    measurements: np.ndarray
    controls: np.ndarray
    params: np.ndarray
    meta: dict
    states: np.ndarray | None = None

    def __post_init__(self):
        x = self.measurements
        if x.ndim < 3:
            raise ValidationError("measurements must be (M, N, *frame_shape)")
        m, n = x.shape[0], x.shape[1]
        if n < 2:
            raise ValidationError("need at least two frames per trajectory")
        if self.controls.shape[:2] != (m, n - 1) or self.controls.ndim != 3:
            raise ValidationError(
                f"controls must be ({m}, {n - 1}, u_dim), got {self.controls.shape}"
            )
        if self.params.ndim != 2 or self.params.shape[0] != m:
            raise ValidationError(f"params must be ({m}, p_dim), got {self.params.shape}")
        if self.states is not None and (self.states.ndim != 3 or self.states.shape[:2] != (m, n)):
            raise ValidationError("states must be (M, N, s_dim) when present")
        for name in ("measurements", "controls", "params"):
            arr = getattr(self, name)
            if arr.dtype != np.float32:
                raise ValidationError(f"{name} must be float32, got {arr.dtype}")
            if not np.isfinite(arr).all():
                raise ValidationError(f"{name} contains non-finite values")

    @property
    def n_traj(self) -> int:
        return self.measurements.shape[0]

    @property
    def n_frames(self) -> int:
        return self.measurements.shape[1]

    @property
    def frame_shape(self) -> tuple:
        return tuple(self.measurements.shape[2:])

    @property
    def control_dim(self) -> int:
        return self.controls.shape[2]

    @property
    def param_dim(self) -> int:
        return self.params.shape[1]


_ARRAY_FILES = {
    "measurements": "measurements.bin",
    "controls": "controls.bin",
    "params": "params.bin",
    "states": "states.bin",
}


def save_dataset(ds: TrajectoryDataset, path) -> None:
    """Write the dataset directory (meta.json + one binary per array)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, fname in _ARRAY_FILES.items():
        arr = getattr(ds, name)
        if arr is None:
            continue
        write_array(root / fname, arr)
        arrays[name] = {"file": fname, "shape": list(arr.shape)}
    meta = dict(ds.meta)
    meta["format_version"] = FORMAT_VERSION
    meta["arrays"] = arrays
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_dataset(path) -> TrajectoryDataset:
    """Load a dataset directory, validating meta/array consistency."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"{root}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{root}: unsupported format_version {version}")
    arrays = {}
    for name, entry in meta["arrays"].items():
        arr = read_array(root / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(
                f"{root}/{entry['file']}: shape {list(arr.shape)} does not match "
                f"meta {entry['shape']}"
            )
        arrays[name] = arr
    meta = {k: v for k, v in meta.items() if k not in ("arrays", "format_version")}
    return TrajectoryDataset(
        measurements=arrays["measurements"],
        controls=arrays["controls"],
        params=arrays["params"],
        meta=meta,
        states=arrays.get("states"),
    )


def split_dataset(
    ds: TrajectoryDataset, test_fraction: float, rng: np.random.Generator
) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Random train/test split at whole-trajectory granularity.

    Both sides always get at least one trajectory; windows therefore never
    mix train and test frames.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must be in (0, 1)")
    m = ds.n_traj
    if m < 2:
        raise ValidationError("need at least two trajectories to split")
    n_test = min(max(int(round(m * test_fraction)), 1), m - 1)
    perm = rng.permutation(m)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    def take(idx):
        return TrajectoryDataset(
            measurements=ds.measurements[idx],
            controls=ds.controls[idx],
            params=ds.params[idx],
            meta=dict(ds.meta),
            states=None if ds.states is None else ds.states[idx],
        )

    return take(train_idx), take(test_idx)


@dataclass(frozen=True)
class WindowBatch:
    """Batched training windows as torch tensors.

    x: (B, L, *frame_shape) measurements, L = history + horizon
    u: (B, L-1, u_dim) controls, u[:, k] drives frame k -> k+1
    p: (B, p_dim) per-trajectory parameters
    sources: (B, 2) int array of (trajectory, offset) pairs
    """

    x: torch.Tensor
    u: torch.Tensor
    p: torch.Tensor
    sources: np.ndarray


def sample_window_indices(
    ds: TrajectoryDataset, batch_size: int, length: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform (trajectory, offset) pairs such that offset + length <= N."""
    if batch_size < 1:
        raise ValidationError("batch_size must be positive")
    if length < 2 or length > ds.n_frames:
        raise ValidationError(
            f"window length {length} not in [2, {ds.n_frames}] for this dataset"
        )
    n_offsets = ds.n_frames - length + 1
    traj = rng.integers(0, ds.n_traj, size=batch_size)
    offs = rng.integers(0, n_offsets, size=batch_size)
    return np.stack([traj, offs], axis=1)


def gather_windows(
    ds: TrajectoryDataset,
    indices: np.ndarray,
    length: int,
    noise_sigma2: float = 0.0,
    rng: np.random.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> WindowBatch:
    """Materialize windows at given (trajectory, offset) pairs, with optional
    measurement noise applied to the gathered copy (the dataset itself is
    never modified)."""
    from .simulators.noise import add_noise

    if noise_sigma2 > 0 and rng is None:
        raise ValidationError("rng is required when noise_sigma2 > 0")
    xs = np.stack(
        [ds.measurements[t, o : o + length] for t, o in indices]
    )
    us = np.stack([ds.controls[t, o : o + length - 1] for t, o in indices])
    ps = ds.params[indices[:, 0]]
    if noise_sigma2 > 0:
        xs = add_noise(xs, noise_sigma2, rng)
    return WindowBatch(
        x=torch.from_numpy(np.ascontiguousarray(xs)).to(dtype),
        u=torch.from_numpy(np.ascontiguousarray(us)).to(dtype),
        p=torch.from_numpy(np.ascontiguousarray(ps)).to(dtype),
        sources=np.asarray(indices),
    )


def sample_windows(
    ds: TrajectoryDataset,
    batch_size: int,
    history_len: int,
    horizon: int,
    rng: np.random.Generator,
    noise_sigma2: float = 0.0,
    dtype: torch.dtype = torch.float32,
) -> WindowBatch:
    """Sample a batch of windows of length history_len + horizon uniformly
    over valid (trajectory, offset) pairs; noise is re-sampled per call."""
    if history_len < 1 or horizon < 1:
        raise ValidationError("history_len and horizon must be positive")
    length = history_len + horizon
    idx = sample_window_indices(ds, batch_size, length, rng)
    return gather_windows(ds, idx, length, noise_sigma2, rng, dtype)
