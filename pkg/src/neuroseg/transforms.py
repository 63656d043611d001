"""Affine coregistration, spline resampling and inverse label mapping.

Resampling convention: the transform passed to a resampler maps OUTPUT grid
voxel coordinates to INPUT volume voxel coordinates (the pull-back map), so
``register_affine(moving, reference)`` returns the transform that resamples
``moving`` onto the reference grid, and ``map_back`` applies its inverse to
carry a segmentation to the original grid.

All operations are pure functions of their inputs and safe to call
concurrently on shared volumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import AffineTransform, GeometryError, LabelMap, Volume

__all__ = [
    "AffineTransform",
    "RegistrationResult",
    "resample_spline",
    "resample_nearest",
    "register_affine",
    "map_back",
    "rotation_transform",
    "translation_transform",
    "scaling_transform",
    "grid_scaling",
    "save_transform",
    "load_transform",
]


@dataclass(frozen=True)
class RegistrationResult:
    transform: AffineTransform
    final_cost: float
    iterations: int
    converged: bool
    initial_cost: float = 0.0


def translation_transform(offset) -> AffineTransform:
    return AffineTransform(np.eye(3), np.asarray(offset, dtype=np.float64))


def scaling_transform(factors, center=(0.0, 0.0, 0.0)) -> AffineTransform:
    """Scale voxel coordinates about ``center``."""
    f = np.asarray(factors, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    return AffineTransform(np.diag(f), c - f * c)


def rotation_transform(angles_deg, center=(0.0, 0.0, 0.0)) -> AffineTransform:
    """Rotate voxel coordinates about ``center``; angles are (x, y, z) in
    degrees, applied as Rz @ Ry @ Rx."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    rot = rz @ ry @ rx
    c = np.asarray(center, dtype=np.float64)
    return AffineTransform(rot, c - rot @ c)


def grid_scaling(out_dims, in_dims) -> AffineTransform:
    """Map output voxel coordinates onto an input grid of different size,
    aligning voxel centers of the two grid extents."""
    out_dims = np.asarray(out_dims, dtype=np.float64)
    in_dims = np.asarray(in_dims, dtype=np.float64)
    f = in_dims / out_dims
    # center voxel i maps to f*(i + 0.5) - 0.5
    return AffineTransform(np.diag(f), 0.5 * f - 0.5)


def _output_coords(t: AffineTransform, out_dims) -> np.ndarray:
    """Input-space sample coordinates (3, X, Y, Z) for every output voxel."""
    xs = np.arange(out_dims[0], dtype=np.float64)[:, None, None]
    ys = np.arange(out_dims[1], dtype=np.float64)[None, :, None]
    zs = np.arange(out_dims[2], dtype=np.float64)[None, None, :]
    lin, tr = t.linear, t.translation
    coords = np.empty((3,) + tuple(int(d) for d in out_dims), dtype=np.float64)
    for d in range(3):
        coords[d] = lin[d, 0] * xs + lin[d, 1] * ys + lin[d, 2] * zs + tr[d]
    return coords


def _integer_gather(data: np.ndarray, coords: np.ndarray, fill):
    """Exact gather when every sample lands on an integer voxel position."""
    idx = np.rint(coords).astype(np.int64)
    inside = np.ones(idx.shape[1:], dtype=bool)
    for d in range(3):
        inside &= (idx[d] >= 0) & (idx[d] < data.shape[d])
    out = np.full(idx.shape[1:], fill, dtype=data.dtype)
    ix, iy, iz = (np.where(inside, idx[d], 0) for d in range(3))
    out[inside] = data[ix, iy, iz][inside]
    return out


def _resample_array(data, t, out_dims, order, fill=0):
    coords = _output_coords(t, out_dims)
    if np.allclose(coords, np.rint(coords), rtol=0.0, atol=1e-9):
        # Integer lattice positions: every interpolator reduces to a gather,
        # which keeps identity and whole-voxel shifts bit-exact.
        return _integer_gather(data, coords, fill)
    if order == 0:
        return ndimage.map_coordinates(data, coords, order=0, mode="constant", cval=fill)
    out = ndimage.map_coordinates(
        data.astype(np.float64), coords, order=order, mode="constant", cval=fill
    )
    return out.astype(data.dtype)


def resample_spline(
    v: Volume,
    t: AffineTransform,
    out_dims: Sequence[int],
    out_spacing: Sequence[float],
    order: int = 3,
) -> Volume:
    """Resample intensities onto a new grid; ``t`` maps output voxel coords
    to input voxel coords. Cubic B-spline by default (order 0/1/3 supported);
    out-of-bounds samples fill with 0."""
    if order not in (0, 1, 3):
        raise ValueError(f"interpolation order must be 0, 1 or 3, got {order}")
    if min(out_dims) < 1:
        raise ValueError(f"output dims must be >= 1, got {tuple(out_dims)}")
    data = _resample_array(v.data, t, out_dims, order)
    return Volume(data, out_spacing, v.affine.compose(t))


def resample_nearest(
    l: LabelMap,
    t: AffineTransform,
    out_dims: Sequence[int],
    out_spacing: Sequence[float],
) -> LabelMap:
    """Nearest-neighbour label resampling; out-of-bounds fills background."""
    if min(out_dims) < 1:
        raise ValueError(f"output dims must be >= 1, got {tuple(out_dims)}")
    labels = _resample_array(l.labels, t, out_dims, order=0)
    return LabelMap(labels, out_spacing, l.affine.compose(t))


def map_back(seg: LabelMap, original: Volume, t: AffineTransform) -> LabelMap:
    """Carry a segmentation back onto the original grid.

    ``t`` is the forward coregistration transform (model-grid voxel ->
    original voxel); its inverse is the pull-back map for resampling onto the
    original grid."""
    return resample_nearest(seg, t.invert(), original.dims, original.spacing)


def _block_mean(data: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return data.astype(np.float64)
    x, y, z = (s // f for s in data.shape)
    trimmed = data[: x * f, : y * f, : z * f].astype(np.float64)
    return trimmed.reshape(x, f, y, f, z, f).mean(axis=(1, 3, 5))


def _intensity_centroid(data: np.ndarray) -> np.ndarray:
    mass = data.astype(np.float64) - float(data.min())
    total = mass.sum()
    if total <= 0:
        return (np.asarray(data.shape, dtype=np.float64) - 1) / 2
    idx = [np.arange(n, dtype=np.float64) for n in data.shape]
    cx = (mass.sum(axis=(1, 2)) * idx[0]).sum() / total
    cy = (mass.sum(axis=(0, 2)) * idx[1]).sum() / total
    cz = (mass.sum(axis=(0, 1)) * idx[2]).sum() / total
    return np.array([cx, cy, cz])


def _mse_cost_grad(mov, grads, ref_l, level, lin, tr, centered, need_grad=True):
    """MSE between the warped moving image and the reference at one pyramid
    level, plus its gradient w.r.t. the 12 affine parameters."""
    f = float(level)
    half = (f - 1.0) / 2.0
    q = np.empty((3,) + ref_l.shape)
    for d in range(3):
        q[d] = (
            lin[d, 0] * centered[0]
            + lin[d, 1] * centered[1]
            + lin[d, 2] * centered[2]
            + tr[d]
        )
    ql = (q - half) / f
    warped = ndimage.map_coordinates(mov, ql, order=1, mode="constant", cval=0.0)
    res = warped - ref_l
    n = res.size
    cost = float((res * res).sum() / n)
    if not need_grad:
        return cost, None, None
    dlin = np.zeros((3, 3))
    dtr = np.zeros(3)
    for d in range(3):
        gd = ndimage.map_coordinates(grads[d], ql, order=1, mode="constant", cval=0.0)
        w = 2.0 / n / f * res * gd
        dtr[d] = w.sum()
        for e in range(3):
            dlin[d, e] = (w * centered[e]).sum()
    return cost, dlin, dtr


def register_affine(
    moving: Volume,
    reference: Volume,
    levels: Tuple[int, ...] = (4, 2, 1),
    iterations: Tuple[int, ...] = (80, 80, 50),
    step: float = 0.02,
) -> RegistrationResult:
    """Affine alignment of ``moving`` to ``reference`` by multi-resolution
    gradient descent on the mean-squared intensity difference.

    Initialized from the intensity centroids; parameters are the linear part
    and a translation around the centroid pairing, updated with adaptive
    per-parameter (Adam-style) steps. Returns the pull-back transform
    (reference-grid voxel -> moving voxel). A level that ends costlier than
    it started flags the result as non-converged; the best-seen parameters
    are returned either way.
    """
    if float(moving.data.max()) == float(moving.data.min()):
        raise ValueError("moving volume is constant; registration is ill-posed")
    if float(reference.data.max()) == float(reference.data.min()):
        raise ValueError("reference volume is constant; registration is ill-posed")
    c_ref = _intensity_centroid(reference.data)
    c_mov = _intensity_centroid(moving.data)
    lin = np.eye(3)
    tr = c_mov.copy()  # transform: q = lin @ (r - c_ref) + tr

    m = np.zeros(12)
    v = np.zeros(12)
    tstep = 0
    total_iters = 0
    diverged = False

    for level, n_iter in zip(levels, iterations):
        if min(reference.dims) // level < 2 or min(moving.dims) // level < 2:
            continue
        ref_l = _block_mean(reference.data, level)
        mov_l = _block_mean(moving.data, level)
        grads = np.gradient(mov_l)
        half = (level - 1.0) / 2.0
        axes_full = [
            np.arange(n, dtype=np.float64) * level + half for n in ref_l.shape
        ]
        centered = [
            (axes_full[0] - c_ref[0])[:, None, None],
            (axes_full[1] - c_ref[1])[None, :, None],
            (axes_full[2] - c_ref[2])[None, None, :],
        ]
        level_start, _, _ = _mse_cost_grad(
            mov_l, grads, ref_l, level, lin, tr, centered, need_grad=False
        )
        best_cost = level_start
        best = (lin.copy(), tr.copy())
        cost = level_start
        for _ in range(n_iter):
            cost, dlin, dtr = _mse_cost_grad(
                mov_l, grads, ref_l, level, lin, tr, centered
            )
            if not np.isfinite(cost):
                diverged = True
                break
            if cost < best_cost:
                best_cost = cost
                best = (lin.copy(), tr.copy())
            g = np.concatenate([dlin.reshape(-1), dtr])
            tstep += 1
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** tstep)
            vh = v / (1 - 0.999 ** tstep)
            upd = step * mh / (np.sqrt(vh) + 1e-12)
            lin = lin - upd[:9].reshape(3, 3)
            tr = tr - upd[9:]
            total_iters += 1
        end_cost, _, _ = _mse_cost_grad(
            mov_l, grads, ref_l, level, lin, tr, centered, need_grad=False
        )
        if not np.isfinite(end_cost) or end_cost > level_start * (1 + 1e-9) + 1e-18:
            diverged = True
        if np.isfinite(end_cost) and end_cost < best_cost:
            best_cost = end_cost
            best = (lin.copy(), tr.copy())
        lin, tr = best[0].copy(), best[1].copy()

    # express q = lin @ (r - c_ref) + tr as q = L r + t
    final_lin = lin
    final_tr = tr - lin @ c_ref
    transform = AffineTransform(final_lin, final_tr)

    # report costs on the finest usable level
    fine = 1
    ref_f = _block_mean(reference.data, fine)
    mov_f = _block_mean(moving.data, fine)
    axes_full = [np.arange(n, dtype=np.float64) for n in ref_f.shape]
    centered = [
        (axes_full[0] - c_ref[0])[:, None, None],
        (axes_full[1] - c_ref[1])[None, :, None],
        (axes_full[2] - c_ref[2])[None, None, :],
    ]
    init_cost, _, _ = _mse_cost_grad(
        mov_f, None, ref_f, fine, np.eye(3), c_mov.copy(), centered, need_grad=False
    )
    final_cost, _, _ = _mse_cost_grad(
        mov_f, None, ref_f, fine, lin, tr, centered, need_grad=False
    )
    if final_cost > init_cost:
        # never report worse than the centroid initialization
        transform = AffineTransform(
            np.eye(3), c_mov - c_ref
        )
        final_cost = init_cost
        diverged = True
    return RegistrationResult(
        transform=transform,
        final_cost=float(final_cost),
        iterations=total_iters,
        converged=not diverged,
        initial_cost=float(init_cost),
    )


def save_transform(t: AffineTransform, path) -> None:
    """Write the row-major 4x4 homogeneous matrix as 16 numbers."""
    rows = t.as_matrix()
    with open(path, "w") as fh:
        for row in rows:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def load_transform(path) -> AffineTransform:
    values = np.loadtxt(path, dtype=np.float64)
    if values.shape != (4, 4):
        raise GeometryError(f"{path}: expected a 4x4 matrix, got {values.shape}")
    if not np.allclose(values[3], (0, 0, 0, 1), atol=1e-12):
        raise GeometryError(f"{path}: last row must be 0 0 0 1")
    return AffineTransform.from_matrix(values)
