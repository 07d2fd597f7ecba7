"""Synthetic multi-ellipsoid head phantoms with CSF / grey / white matter labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import Volume, normalize


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    n_ellipsoids: int = 4  # extra small lesion-like blobs
    skull: float = 0.85
    csf: float = 0.15
    grey: float = 0.45
    white: float = 0.7
    blur: float = 0.8  # gaussian sigma in voxels
    seed: int = 0


def _rotation(rng, max_angle=0.3):
    a, b, c = rng.uniform(-max_angle, max_angle, 3)
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rx @ ry @ rz


def _ellipsoid_radius(coords, center, axes, rot):
    # normalised radius: < 1 inside the ellipsoid
    local = np.einsum("ij,j...->i...", rot.T, coords - center.reshape(3, 1, 1, 1))
    return np.sqrt(sum((local[i] / axes[i]) ** 2 for i in range(3)))


def make_phantom(spec: PhantomSpec, index: int = 0) -> tuple[Volume, np.ndarray]:
    """One normalised phantom volume and its integer tissue labels (1 CSF, 2 GM, 3 WM)."""
    rng = np.random.default_rng([spec.seed, index])
    coords = np.stack(np.meshgrid(*[np.linspace(-1, 1, n) for n in spec.dims], indexing="ij"))
    rot = _rotation(rng)
    head_axes = rng.uniform(0.8, 0.95, 3)
    center = rng.uniform(-0.04, 0.04, 3)
    r_head = _ellipsoid_radius(coords, center, head_axes, rot)

    # folded grey/white boundary: radial modulation by a few random harmonics
    local = np.einsum("ij,j...->i...", rot.T, coords - center.reshape(3, 1, 1, 1))
    theta = np.arctan2(local[1], local[0])
    elev = np.arctan2(local[2], np.hypot(local[0], local[1]))
    folds = np.zeros_like(theta)
    for _ in range(3):
        kt, ke = rng.integers(3, 9), rng.integers(2, 7)
        folds += rng.uniform(0.02, 0.05) * np.sin(kt * theta + rng.uniform(0, 2 * np.pi)) \
            * np.cos(ke * elev + rng.uniform(0, 2 * np.pi))

    brain_r = rng.uniform(0.78, 0.84)
    white_r = rng.uniform(0.5, 0.62)
    labels = np.zeros(spec.dims, dtype=np.int8)
    img = np.zeros(spec.dims, dtype=np.float64)
    img[r_head < 1.0] = spec.skull
    img[r_head < 0.88] = spec.csf
    labels[r_head < 0.88] = 1
    brain = r_head < brain_r + folds
    img[brain] = spec.grey
    labels[brain] = 2
    white = r_head < white_r + 1.5 * folds
    img[white] = spec.white
    labels[white] = 3

    # ventricles
    for side in (-1, 1):
        vc = center + rot @ np.array([side * rng.uniform(0.1, 0.16), rng.uniform(-0.05, 0.05), 0.0])
        va = rng.uniform([0.05, 0.15, 0.08], [0.09, 0.25, 0.14])
        vent = _ellipsoid_radius(coords, vc, va, rot) < 1.0
        img[vent] = spec.csf
        labels[vent] = 1

    for _ in range(spec.n_ellipsoids):
        bc = center + rng.uniform(-0.4, 0.4, 3)
        ba = rng.uniform(0.04, 0.12, 3)
        blob = (_ellipsoid_radius(coords, bc, ba, _rotation(rng, np.pi)) < 1.0) & (r_head < brain_r)
        img[blob] = rng.choice([spec.csf, spec.grey, spec.white]) + rng.uniform(-0.05, 0.05)

    if spec.blur > 0:
        img = gaussian_filter(img, spec.blur)
    return normalize(Volume(img.astype(np.float32))), labels


def generate_phantoms(spec: PhantomSpec, count: int, with_labels: bool = False):
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    made = [make_phantom(spec, i) for i in range(count)]
    if with_labels:
        return [v for v, _ in made], [lab for _, lab in made]
    return [v for v, _ in made]
