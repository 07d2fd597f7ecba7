"""Volume I/O, thick-slice degradation and LR/HR slice-pair extraction."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}
AXIS_NAMES = {"x": "sagittal", "y": "coronal", "z": "axial"}
# plane label -> axis the slices are indexed along
PLANES = {"x-y": "z", "x-z": "y", "y-z": "x"}

MAGIC = b"TMRV1"
_HEADER = struct.Struct("<5sIII")


class VolumeError(ValueError):
    pass


class BadMagicError(VolumeError):
    pass


class TruncatedPayloadError(VolumeError):
    pass


class DimensionMismatchError(VolumeError):
    pass


class DegenerateRangeError(VolumeError):
    pass


@dataclass
class Volume:
    """A 3-D intensity grid indexed (x, y, z) = (sagittal, coronal, axial)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise VolumeError(f"volume data must be 3-D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise VolumeError(f"volume dims must be positive, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise VolumeError("volume contains non-finite intensities")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)


@dataclass
class SlicePair:
    lr: np.ndarray
    hr: np.ndarray
    plane: str
    index: int
    scale_r: int
    # (row0, row1, col0, col1) of the unpadded slice inside the padded canvas
    pad_box: tuple[int, int, int, int]
    volume_id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr.shape != self.hr.shape:
            raise VolumeError(f"lr {self.lr.shape} and hr {self.hr.shape} differ in shape")


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise VolumeError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}")
        return AXES[axis]
    if axis not in (0, 1, 2):
        raise VolumeError(f"unknown axis {axis!r}")
    return int(axis)


def write_volume(v: Volume, path) -> None:
    x, y, z = v.dims
    payload = np.ascontiguousarray(v.data.astype("<f4").ravel(order="F")).tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, x, y, z))
        fh.write(payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a TMRV1 volume")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, x, y, z = _HEADER.unpack_from(raw)
    if min(x, y, z) == 0:
        raise DimensionMismatchError(f"{path}: zero dimension in header ({x}, {y}, {z})")
    payload = raw[_HEADER.size:]
    expected = 4 * x * y * z
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: header dims ({x}, {y}, {z}) need {expected} bytes, found {len(payload)}"
        )
    if len(payload) != expected:
        raise DimensionMismatchError(
            f"{path}: payload of {len(payload)} bytes does not match dims ({x}, {y}, {z})"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape((x, y, z), order="F")
    return Volume(data.astype(np.float32))


def normalize(v: Volume) -> Volume:
    lo, hi = float(v.data.min()), float(v.data.max())
    if not hi > lo:
        raise DegenerateRangeError("cannot normalize a constant volume")
    data = (v.data.astype(np.float64) - lo) / (hi - lo)
    return replace(v, data=np.clip(data, 0.0, 1.0).astype(np.float32))


def decimated_indices(n: int, r: int) -> np.ndarray:
    return np.arange(0, n, r)


def degrade_volume(v: Volume, r: int, axis="z", mode: str = "decimate") -> Volume:
    """Simulate a thick-slice acquisition by keeping every ``r``-th plane.

    ``mode="average"`` averages each slab of ``r`` planes instead.
    """
    ax = _axis_index(axis)
    n = v.dims[ax]
    if r < 1:
        raise VolumeError(f"factor must be >= 1, got {r}")
    if r == 1:
        return replace(v, data=v.data.copy())
    if r > n:
        raise VolumeError(f"factor {r} exceeds axis length {n}")
    if mode == "decimate":
        data = np.take(v.data, decimated_indices(n, r), axis=ax)
    elif mode == "average":
        slabs = [np.take(v.data, np.arange(i, min(i + r, n)), axis=ax).mean(axis=ax)
                 for i in range(0, n, r)]
        data = np.stack(slabs, axis=ax)
    else:
        raise VolumeError(f"unknown degradation mode {mode!r}")
    spacing = list(v.spacing)
    spacing[ax] *= r
    return Volume(data, tuple(spacing))


def _catmull_rom(p0, p1, p2, p3, u):
    return 0.5 * (
        2.0 * p1
        + (p2 - p0) * u
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u**2
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u**3
    )


def cubic_resample(data: np.ndarray, r: int, axis: int, target_len: int) -> np.ndarray:
    """Catmull-Rom interpolation of samples at HR positions ``0, r, 2r, ...``.

    Ghost samples are linearly extrapolated so ramps are reproduced exactly,
    including past the last retained plane.
    """
    a = np.moveaxis(data.astype(np.float64), axis, 0)
    m = a.shape[0]
    if m == 1:
        out = np.repeat(a, target_len, axis=0)
        return np.moveaxis(out, 0, axis)
    ext = np.concatenate([2 * a[:1] - a[1:2], a, 2 * a[-1:] - a[-2:-1]], axis=0)
    t = np.arange(target_len, dtype=np.float64) / r
    k = np.clip(np.floor(t).astype(int), 0, m - 2)
    u = (t - k).reshape((-1,) + (1,) * (a.ndim - 1))
    # ext is shifted by one relative to a
    out = _catmull_rom(ext[k], ext[k + 1], ext[k + 2], ext[k + 3], u)
    return np.moveaxis(out, 0, axis)


def upsample_to_hr(v: Volume, r: int, axis="z", target_len: int | None = None) -> Volume:
    ax = _axis_index(axis)
    n = v.dims[ax]
    if target_len is None:
        target_len = n * r
    if abs(target_len - r * n) >= r:
        raise VolumeError(
            f"target length {target_len} is inconsistent with {n} samples at factor {r}"
        )
    if r == 1:
        return replace(v, data=v.data.copy())
    data = np.clip(cubic_resample(v.data, r, ax, target_len), 0.0, 1.0)
    spacing = list(v.spacing)
    spacing[ax] /= r
    return Volume(data.astype(np.float32), tuple(spacing))


def simulate_lr(hr: Volume, r: int, axis="z", mode: str = "decimate") -> Volume:
    """Degrade then interpolate back so the result lives on the HR grid."""
    ax = _axis_index(axis)
    low = degrade_volume(hr, r, axis, mode=mode)
    return upsample_to_hr(low, r, axis, target_len=hr.dims[ax])


def take_slice(data: np.ndarray, plane: str, index: int) -> np.ndarray:
    return np.take(data, index, axis=AXES[PLANES[plane]])


def pad_to(img: np.ndarray, size: int = 256) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    h, w = img.shape
    if h > size or w > size:
        raise VolumeError(f"slice {img.shape} does not fit in a {size}x{size} canvas")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((size, size), dtype=np.float32)
    out[top:top + h, left:left + w] = img
    return out, (top, top + h, left, left + w)


def crop(img: np.ndarray, pad_box) -> np.ndarray:
    r0, r1, c0, c1 = pad_box
    return img[..., r0:r1, c0:c1]


def extract_pairs(hr: Volume, r: int, plane: str = "x-z", axis="z", pad_size: int = 256,
                  volume_id: str = "", mode: str = "decimate") -> list[SlicePair]:
    """LR/HR training pairs for every informative slice of ``plane``."""
    if plane not in PLANES:
        raise VolumeError(f"unknown plane {plane!r}; expected one of {sorted(PLANES)}")
    if hr.data.max() == 0:
        return []
    lr = simulate_lr(hr, r, axis, mode=mode)
    pairs = []
    for i in range(hr.dims[AXES[PLANES[plane]]]):
        h = take_slice(hr.data, plane, i)
        if h.max() == 0:
            continue
        hp, box = pad_to(h, pad_size)
        lp, _ = pad_to(take_slice(lr.data, plane, i), pad_size)
        pairs.append(SlicePair(lp, hp, plane, i, r, box, volume_id))
    return pairs


def augment(p: SlicePair, rng: np.random.Generator) -> SlicePair:
    """Random h-flip, v-flip and transpose, each with probability 0.5, applied to both images."""
    hflip, vflip, transpose = rng.random(3) < 0.5
    lr, hr = p.lr, p.hr
    size_r, size_c = lr.shape
    r0, r1, c0, c1 = p.pad_box
    if hflip:
        lr, hr = lr[:, ::-1], hr[:, ::-1]
        c0, c1 = size_c - c1, size_c - c0
    if vflip:
        lr, hr = lr[::-1, :], hr[::-1, :]
        r0, r1 = size_r - r1, size_r - r0
    if transpose:
        lr, hr = lr.T, hr.T
        r0, r1, c0, c1 = c0, c1, r0, r1
    return replace(p, lr=np.ascontiguousarray(lr), hr=np.ascontiguousarray(hr),
                   pad_box=(r0, r1, c0, c1), extra=dict(p.extra, aug=(bool(hflip), bool(vflip), bool(transpose))))


def write_pgm(img: np.ndarray, path) -> None:
    """16-bit binary PGM, value = round(65535 * clip(img, 0, 1))."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise VolumeError(f"PGM export needs a 2-D image, got shape {img.shape}")
    vals = np.round(65535.0 * np.clip(img, 0.0, 1.0)).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(vals.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise VolumeError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = raw[len(raw) - 2 * w * h:] if maxval > 255 else raw[len(raw) - w * h:]
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def n_retained(n: int, r: int) -> int:
    return math.ceil(n / r)
