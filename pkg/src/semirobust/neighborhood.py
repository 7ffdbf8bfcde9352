"""Transformation-based perturbation neighborhoods.

A neighborhood is the set of images ``T(x; theta)`` whose distance to ``x``
is within a budget. Three families are supported:

* ``pixel``: ``clip(x + delta, 0, 1)`` with ``||delta||_inf <= epsilon_pixel``.
* ``spatial``: rotation about the image center (bilinear, zero padding)
  followed by an integer translation, bounded by ``epsilon_rot`` degrees and
  ``epsilon_trans`` pixels per axis.
* ``compound``: both of the above, applied in sequence.

Images are ``torch`` tensors shaped ``(C, H, W)`` or batches ``(N, C, H, W)``
with values in ``[0, 1]``. Positive rotations turn the content
counter-clockwise as displayed (row 0 at the top); a translation ``(dx, dy)``
moves content ``dx`` columns right and ``dy`` rows down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ContractError

__all__ = [
    "TransformParams",
    "NeighborhoodSpec",
    "apply",
    "apply_spatial",
    "distance",
    "within_budget",
    "grid_values",
    "enumerate_grid",
    "sample_random",
    "sample_spatial_batch",
]

KINDS = ("pixel", "spatial", "compound")
ORDERS = ("pixel_first", "spatial_first")


@dataclass(frozen=True, eq=False)
class TransformParams:
    """Parameters of one transformation drawn from a neighborhood.

    ``order`` only matters for compound parameters: ``pixel_first`` computes
    ``S(clip(x + delta))`` and ``spatial_first`` computes ``clip(S(x) + delta)``.
    """

    kind: str
    pixel_delta: torch.Tensor | None = None
    rotation_deg: float | None = None
    translate_px: tuple[int, int] | None = None
    order: str = "pixel_first"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown transform kind {self.kind!r}")
        if self.order not in ORDERS:
            raise ContractError(f"unknown compound order {self.order!r}")
        has_pixel = self.pixel_delta is not None
        has_spatial = self.rotation_deg is not None and self.translate_px is not None
        partial_spatial = (self.rotation_deg is None) != (self.translate_px is None)
        if partial_spatial:
            raise ContractError("spatial params need both rotation_deg and translate_px")
        wanted = {"pixel": (True, False), "spatial": (False, True), "compound": (True, True)}
        if (has_pixel, has_spatial) != wanted[self.kind]:
            raise ContractError(f"fields present do not match kind {self.kind!r}")
        if has_spatial:
            dx, dy = self.translate_px
            if int(dx) != dx or int(dy) != dy:
                raise ContractError("translations must be whole pixels")
            object.__setattr__(self, "translate_px", (int(dx), int(dy)))
            object.__setattr__(self, "rotation_deg", float(self.rotation_deg))

    @classmethod
    def spatial(cls, rotation_deg: float, dx: int, dy: int) -> "TransformParams":
        return cls("spatial", rotation_deg=rotation_deg, translate_px=(dx, dy))

    @classmethod
    def pixel(cls, delta: torch.Tensor) -> "TransformParams":
        return cls("pixel", pixel_delta=delta)

    @property
    def spatial_key(self) -> tuple[float, int, int]:
        """Hashable ``(rotation, dx, dy)`` triple of the spatial part."""
        if self.rotation_deg is None:
            raise ContractError("no spatial part")
        return (self.rotation_deg, *self.translate_px)


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Budgets of a neighborhood; ``kind`` selects which budgets are active."""

    kind: str
    epsilon_pixel: float = 0.0
    epsilon_rot: float = 0.0
    epsilon_trans: int = 0
    grid_counts: tuple[int, int] = (31, 5)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown neighborhood kind {self.kind!r}")
        if min(self.epsilon_pixel, self.epsilon_rot, self.epsilon_trans) < 0:
            raise ContractError("budgets must be non-negative")
        if int(self.epsilon_trans) != self.epsilon_trans:
            raise ContractError("epsilon_trans must be a whole number of pixels")
        counts = tuple(int(c) for c in self.grid_counts)
        if len(counts) != 2 or min(counts) < 1:
            raise ContractError("grid_counts must be two positive integers")
        object.__setattr__(self, "grid_counts", counts)
        object.__setattr__(self, "epsilon_trans", int(self.epsilon_trans))

    @property
    def has_pixel(self) -> bool:
        return self.kind in ("pixel", "compound")

    @property
    def has_spatial(self) -> bool:
        return self.kind in ("spatial", "compound")

    def pixel_part(self) -> "NeighborhoodSpec":
        return NeighborhoodSpec("pixel", epsilon_pixel=self.epsilon_pixel)

    def spatial_part(self) -> "NeighborhoodSpec":
        return NeighborhoodSpec(
            "spatial",
            epsilon_rot=self.epsilon_rot,
            epsilon_trans=self.epsilon_trans,
            grid_counts=self.grid_counts,
        )

    @property
    def grid_size(self) -> int:
        rotations, translations = self.grid_counts
        return rotations * translations * translations


def _spatial_theta(rotation_deg: torch.Tensor, translate: torch.Tensor, height: int, width: int) -> torch.Tensor:
    # affine_grid maps output coordinates to input coordinates, so build the
    # inverse of p_out = R p_in + t in pixel units, then rescale to [-1, 1].
    angle = rotation_deg.to(torch.float64) * (math.pi / 180.0)
    cos, sin = torch.cos(angle), torch.sin(angle)
    sx, sy = width / 2.0, height / 2.0
    # R (y axis pointing down, positive = counter-clockwise on screen) is
    # [[cos, sin], [-sin, cos]]; its inverse is the transpose.
    a11, a12 = cos, -sin * sy / sx
    a21, a22 = sin * sx / sy, cos
    tx = translate[:, 0].to(torch.float64)
    ty = translate[:, 1].to(torch.float64)
    b1 = -(cos * tx - sin * ty) / sx
    b2 = -(sin * tx + cos * ty) / sy
    theta = torch.stack(
        [torch.stack([a11, a12, b1], dim=-1), torch.stack([a21, a22, b2], dim=-1)], dim=-2
    )
    return theta


def apply_spatial(x: torch.Tensor, rotation_deg, translate) -> torch.Tensor:
    """Rotate then translate every image in a batch.

    ``rotation_deg`` has shape ``(N,)`` and ``translate`` shape ``(N, 2)``;
    scalars/pairs are broadcast over the batch.
    """
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    n, _, height, width = x.shape
    rot = torch.as_tensor(rotation_deg, dtype=torch.float64).reshape(-1)
    trans = torch.as_tensor(translate, dtype=torch.float64).reshape(-1, 2)
    if rot.numel() == 1:
        rot = rot.expand(n)
    if trans.shape[0] == 1:
        trans = trans.expand(n, 2)
    if rot.shape[0] != n or trans.shape[0] != n:
        raise ContractError("one spatial parameter per image is required")
    theta = _spatial_theta(rot, trans, height, width).to(x.dtype)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    # the identity transform must reproduce x bit for bit
    ident = (rot == 0) & (trans == 0).all(1)
    if ident.any():
        out = torch.where(ident.view(-1, 1, 1, 1), x, out)
    return out[0] if single else out


def _apply_pixel(x: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    if tuple(delta.shape) != tuple(x.shape[-delta.dim():]) and tuple(delta.shape) != tuple(x.shape):
        raise ContractError(f"pixel_delta shape {tuple(delta.shape)} does not match image {tuple(x.shape)}")
    return (x + delta.to(x.dtype)).clamp(0.0, 1.0)


def apply(x: torch.Tensor, p: TransformParams) -> torch.Tensor:
    """Return ``T(x; p)``."""
    if p.kind == "pixel":
        return _apply_pixel(x, p.pixel_delta)
    if p.kind == "spatial":
        return apply_spatial(x, p.rotation_deg, [p.translate_px])
    if p.order == "pixel_first":
        return apply_spatial(_apply_pixel(x, p.pixel_delta), p.rotation_deg, [p.translate_px])
    return _apply_pixel(apply_spatial(x, p.rotation_deg, [p.translate_px]), p.pixel_delta)


def distance(spec: NeighborhoodSpec, p: TransformParams) -> tuple[float, ...]:
    """Distance vector of ``p``: pixel ``(linf,)``, spatial ``(|rot|, max|t|)``,
    compound ``(linf, |rot|, max|t|)``."""
    if p.kind != spec.kind:
        raise ContractError(f"params of kind {p.kind!r} measured against a {spec.kind!r} spec")
    out: list[float] = []
    if p.pixel_delta is not None:
        out.append(float(p.pixel_delta.abs().max()) if p.pixel_delta.numel() else 0.0)
    if p.rotation_deg is not None:
        dx, dy = p.translate_px
        out.extend([abs(p.rotation_deg), float(max(abs(dx), abs(dy)))])
    return tuple(out)


def _budgets(spec: NeighborhoodSpec) -> tuple[float, ...]:
    if spec.kind == "pixel":
        return (spec.epsilon_pixel,)
    if spec.kind == "spatial":
        return (spec.epsilon_rot, float(spec.epsilon_trans))
    return (spec.epsilon_pixel, spec.epsilon_rot, float(spec.epsilon_trans))


def within_budget(spec: NeighborhoodSpec, p: TransformParams, pixel_tol: float = 1e-6) -> bool:
    """Componentwise membership check; spatial components are compared exactly."""
    dist = distance(spec, p)
    tols = [pixel_tol if spec.has_pixel and i == 0 else 1e-9 for i in range(len(dist))]
    return all(d <= b + t for d, b, t in zip(dist, _budgets(spec), tols))


def grid_values(spec: NeighborhoodSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rotation values and per-axis integer translation values of the grid."""
    if not spec.has_spatial:
        raise ContractError("pixel neighborhoods are continuous and cannot be enumerated")
    n_rot, n_trans = spec.grid_counts
    rotations = np.linspace(-spec.epsilon_rot, spec.epsilon_rot, n_rot) if n_rot > 1 else np.zeros(1)
    if n_trans > 1:
        translations = np.rint(np.linspace(-spec.epsilon_trans, spec.epsilon_trans, n_trans))
    else:
        translations = np.zeros(1)
    return rotations, translations.astype(np.int64)


def _grid_arrays(spec: NeighborhoodSpec) -> tuple[np.ndarray, np.ndarray]:
    rotations, translations = grid_values(spec)
    rot, dx, dy = np.meshgrid(rotations, translations, translations, indexing="ij")
    return rot.ravel(), np.stack([dx.ravel(), dy.ravel()], axis=1)


def enumerate_grid(spec: NeighborhoodSpec) -> list[TransformParams]:
    """All spatial grid parameters, rotation-major, then dx, then dy."""
    rot, trans = _grid_arrays(spec)
    return [TransformParams.spatial(float(r), int(t[0]), int(t[1])) for r, t in zip(rot, trans)]


def grid_tensors(spec: NeighborhoodSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """The grid of :func:`enumerate_grid` as ``(rotations (G,), translations (G, 2))``."""
    rot, trans = _grid_arrays(spec)
    return torch.from_numpy(rot.copy()), torch.from_numpy(trans.copy())


def sample_spatial_batch(spec: NeighborhoodSpec, rng: np.random.Generator, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """``size`` independent uniform draws from the spatial grid."""
    rotations, translations = grid_values(spec)
    rot = rotations[rng.integers(0, len(rotations), size)]
    trans = translations[rng.integers(0, len(translations), (size, 2))]
    return torch.from_numpy(rot), torch.from_numpy(trans)


def sample_random(
    spec: NeighborhoodSpec, rng: np.random.Generator, shape: Sequence[int] | None = None
) -> TransformParams:
    """Draw one parameter uniformly from the neighborhood.

    Spatial draws are uniform over the attack grid; pixel draws are uniform
    over ``[-eps, eps]`` per component and need the image ``shape``.
    """
    if spec.kind == "spatial":
        rot, trans = sample_spatial_batch(spec, rng, 1)
        return TransformParams.spatial(float(rot[0]), int(trans[0, 0]), int(trans[0, 1]))
    if shape is None:
        raise ContractError("pixel sampling needs the image shape")
    delta = rng.uniform(-spec.epsilon_pixel, spec.epsilon_pixel, size=tuple(shape))
    delta = torch.from_numpy(delta.astype(np.float32))
    if spec.kind == "pixel":
        return TransformParams.pixel(delta)
    rot, trans = sample_spatial_batch(spec, rng, 1)
    return TransformParams(
        "compound", pixel_delta=delta, rotation_deg=float(rot[0]), translate_px=(int(trans[0, 0]), int(trans[0, 1]))
    )
