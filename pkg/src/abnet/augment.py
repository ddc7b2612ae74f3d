"""Learnable affine augmentation of 3D feature maps.

A matrix acts on normalized coordinates ``(x, y, z) in [-1, 1]^3`` where x
runs along the width, y along the height and z along the channels. Warping
is an inverse map: each output cell reads the input at ``A @ (x, y, z, 1)``
through trilinear interpolation, with zero contribution from corners that
fall outside the map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .nn import Module, Tensor, ops
from .nn.module import parameter
from .nn.tensor import as_tensor, make_result, note_branch

IDENTITY = np.eye(3, 4)
_SNAP = 1e-9


def _axis_coords(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def _to_index(u: np.ndarray, n: int) -> tuple[np.ndarray, float]:
    scale = (n - 1) / 2.0 if n > 1 else 1.0
    s = (u + 1.0) * scale if n > 1 else u
    snapped = np.rint(s)
    s = np.where(np.abs(s - snapped) < _SNAP, snapped, s)
    return s, scale


def affine_grid_sample(x, theta) -> Tensor:
    """Warp ``[C,H,W]`` or ``[B,C,H,W]`` features by one 3x4 matrix."""
    x, theta = as_tensor(x), as_tensor(theta)
    if theta.shape != (3, 4):
        raise ValueError(f"theta must be 3x4, got {theta.shape}")
    squeeze = x.ndim == 3
    xb = x.data[None] if squeeze else x.data
    if xb.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    B, C, H, W = xb.shape
    N = C * H * W
    zn, yn, xn = np.meshgrid(_axis_coords(C), _axis_coords(H), _axis_coords(W), indexing="ij")
    coords = np.stack([xn.ravel(), yn.ravel(), zn.ravel(), np.ones(N)])  # 4 x N
    u = theta.data @ coords  # rows: x, y, z
    sx, kx = _to_index(u[0], W)
    sy, ky = _to_index(u[1], H)
    sz, kz = _to_index(u[2], C)

    def corners(s, n):
        i0 = np.floor(s).astype(np.int64)
        f = s - i0
        out = []
        for i, w, sign in ((i0, 1.0 - f, -1.0), (i0 + 1, f, 1.0)):
            valid = (i >= 0) & (i <= n - 1)
            out.append((np.clip(i, 0, n - 1), np.where(valid, w, 0.0), np.where(valid, sign, 0.0)))
        return out

    cx, cy, cz = corners(sx, W), corners(sy, H), corners(sz, C)
    note_branch(np.floor(np.stack([sx, sy, sz])))
    rows = np.arange(N)
    idx_all, w_all, parts = [], [], []
    for iz, wz, gz in cz:
        for iy, wy, gy in cy:
            for ix, wx, gx in cx:
                idx = (iz * H + iy) * W + ix
                idx_all.append(idx)
                w_all.append(wz * wy * wx)
                parts.append((idx, gx * wy * wz, wx * gy * wz, wx * wy * gz))
    M = sp.csr_matrix(
        (np.concatenate(w_all), (np.tile(rows, 8), np.concatenate(idx_all))), shape=(N, N)
    )
    flat = xb.reshape(B, N)
    out = np.asarray((M @ flat.T).T).reshape(B, C, H, W)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        gb = (g[None] if squeeze else g).reshape(B, N)
        dx = None
        if x.requires_grad:
            dx = np.asarray((M.T @ gb.T).T).reshape(xb.shape)
            if squeeze:
                dx = dx[0]
        dtheta = None
        if theta.requires_grad:
            ds = np.zeros((3, N))
            for idx, dwx, dwy, dwz in parts:
                vals = flat[:, idx] * gb  # B x N
                v = vals.sum(axis=0)
                ds[0] += dwx * v
                ds[1] += dwy * v
                ds[2] += dwz * v
            du = ds * np.array([[kx], [ky], [kz]])
            dtheta = du @ coords.T
        return dx, dtheta

    return make_result("affine_grid_sample", out, (x, theta), grad_fn)


def apply_affine(feature, matrix) -> Tensor:
    return affine_grid_sample(feature, matrix)


class AffineBank(Module):
    """Fixed identity plus ``K`` learnable 3x4 matrices (bottom row implicit)."""

    def __init__(self, k: int, seed: int = 0, spatial_only: bool = False, init_scale: float = 0.05):
        if k < 1:
            raise ValueError("K must be >= 1")
        rng = np.random.default_rng(seed)
        init = np.stack([IDENTITY + rng.uniform(-init_scale, init_scale, size=(3, 4)) for _ in range(k)])
        self.matrices = parameter(init)
        self.k = k
        self.spatial_only = spatial_only

    @property
    def identity(self) -> np.ndarray:
        return IDENTITY.copy()

    def matrix(self, k: int) -> Tensor:
        """Effective matrix ``k`` (0 is the identity)."""
        if k == 0:
            return Tensor(IDENTITY)
        m = ops.getitem(self.matrices, k - 1)
        if self.spatial_only:
            # keep only the x/y rows' x, y and translation entries; z passes through
            mask = np.zeros((3, 4))
            mask[:2, [0, 1, 3]] = 1.0
            fixed = np.zeros((3, 4))
            fixed[2, 2] = 1.0
            m = ops.add(ops.mul(m, mask), fixed)
        return m


def init_bank(k: int, seed: int = 0, spatial_only: bool = False) -> AffineBank:
    return AffineBank(k, seed, spatial_only)


@dataclass
class AugmentedFamily:
    members: list[Tensor]

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, k: int) -> Tensor:
        return self.members[k]


def augment_family(feature, bank: AffineBank) -> AugmentedFamily:
    """``[f, A_1 f, ..., A_K f]``; member 0 is the input object itself."""
    feature = feature.tensor if hasattr(feature, "tensor") else as_tensor(feature)
    members = [feature] + [affine_grid_sample(feature, bank.matrix(k)) for k in range(1, bank.k + 1)]
    return AugmentedFamily(members)
