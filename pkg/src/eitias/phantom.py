"""Ground-truth conductivities, simulated electrode data, seeded noise.

Data are generated on a separate (typically finer) mesh than the one used
for reconstruction, to keep the inversion honest.  The noise generator is
pinned down exactly for reproducible data files: uniforms from numpy's PCG64
stream for the given seed, mapped through the Box-Muller transform.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .cem import (
    CemSystem,
    CurrentBasis,
    MeasurementSet,
    assemble_system,
    forward_map,
)
from .fileio import read_json
from .mesh import ElectrodeLayout, Mesh, SubdomainMap, mesh_id


@dataclass(frozen=True)
class DiscInclusion:
    center: tuple[float, float]
    radius: float
    value: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = points - np.asarray(self.center)
        return (d**2).sum(axis=-1) <= self.radius**2


@dataclass(frozen=True)
class RectangleInclusion:
    corner: tuple[float, float]  # lower-left
    width: float
    height: float
    value: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        x0, y0 = self.corner
        x, y = points[..., 0], points[..., 1]
        return (x >= x0) & (x <= x0 + self.width) & (y >= y0) & (y <= y0 + self.height)


@dataclass(frozen=True)
class PhantomSpec:
    """Piecewise-constant target: a background value plus inclusions.

    Later inclusions shadow earlier ones where they overlap.  All values are
    conductivities and must be positive; inclusions must fit inside the unit
    disc.
    """

    background: float
    inclusions: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.background <= 0:
            raise ValidationError("background conductivity must be positive")
        for inc in self.inclusions:
            if inc.value <= 0:
                raise ValidationError("inclusion conductivity must be positive")
            if isinstance(inc, DiscInclusion):
                if np.hypot(*inc.center) + inc.radius > 1.0:
                    raise ValidationError("disc inclusion leaves the unit disc")
            elif isinstance(inc, RectangleInclusion):
                x0, y0 = inc.corner
                corners = np.array(
                    [[x0, y0], [x0 + inc.width, y0], [x0, y0 + inc.height],
                     [x0 + inc.width, y0 + inc.height]]
                )
                if np.any(np.hypot(corners[:, 0], corners[:, 1]) > 1.0):
                    raise ValidationError("rectangle inclusion leaves the unit disc")
            else:
                raise ValidationError(f"unknown inclusion type {type(inc).__name__}")
        object.__setattr__(self, "inclusions", tuple(self.inclusions))

    def value_at(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        out = np.full(points.shape[0], float(self.background))
        for inc in self.inclusions:
            out[inc.contains(points)] = inc.value
        return out

    def to_dict(self) -> dict:
        items = []
        for inc in self.inclusions:
            if isinstance(inc, DiscInclusion):
                items.append(
                    {"shape": "disc", "center": list(inc.center), "radius": inc.radius,
                     "value": inc.value}
                )
            else:
                items.append(
                    {"shape": "rectangle", "corner": list(inc.corner), "width": inc.width,
                     "height": inc.height, "value": inc.value}
                )
        return {"background": self.background, "inclusions": items}

    @classmethod
    def from_dict(cls, raw: dict) -> "PhantomSpec":
        incs = []
        for item in raw.get("inclusions", []):
            if item.get("shape") == "disc":
                incs.append(
                    DiscInclusion(center=tuple(item["center"]), radius=float(item["radius"]),
                                  value=float(item["value"]))
                )
            elif item.get("shape") == "rectangle":
                incs.append(
                    RectangleInclusion(corner=tuple(item["corner"]), width=float(item["width"]),
                                       height=float(item["height"]), value=float(item["value"]))
                )
            else:
                raise ValidationError(f"unknown inclusion shape {item.get('shape')!r}")
        return cls(background=float(raw["background"]), inclusions=tuple(incs))

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_dict(read_json(path))


def rasterize_phantom(spec: PhantomSpec, mesh: Mesh, sigma0: float | None = None) -> np.ndarray:
    """Per-element conductivity perturbation by the centroid rule.

    Returns sigma(centroid) - sigma0 for every element; sigma0 defaults to
    the phantom background.
    """
    base = spec.background if sigma0 is None else float(sigma0)
    values = spec.value_at(mesh.centroids())
    if np.any(values <= 0):
        raise ValidationError("phantom rasterization produced non-positive conductivity")
    return values - base


def gaussian_noise(seed: int, size: int) -> np.ndarray:
    """Standard normals from PCG64 uniforms through Box-Muller.

    The scheme is pinned for data-file reproducibility: draw two blocks of
    uniforms u1, u2 from ``numpy.random.Generator(PCG64(seed)).random``,
    then z = sqrt(-2 log(1-u1)) * (cos, sin)(2 pi u2), interleaved.
    """
    gen = np.random.Generator(np.random.PCG64(int(seed)))
    half = (size + 1) // 2
    u1 = gen.random(half)
    u2 = gen.random(half)
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    z = np.empty(2 * half)
    z[0::2] = radius * np.cos(2.0 * np.pi * u2)
    z[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return z[:size]


def simulate_measurement(
    spec: PhantomSpec,
    data_mesh: Mesh,
    layout: ElectrodeLayout,
    basis: CurrentBasis,
    noise_percent: float,
    seed: int,
    reconstruction_mesh_id: str | None = None,
) -> MeasurementSet:
    """Solve the forward problem on the data mesh and add seeded noise.

    The noise level is `noise_percent` percent of the largest noiseless
    electrode voltage.  If the data mesh identifier matches the provided
    reconstruction mesh identifier, a non-fatal warning is emitted and the
    collision is recorded in the provenance.
    """
    if noise_percent < 0:
        raise ValidationError("noise percent must be nonnegative")
    sub = SubdomainMap.whole(data_mesh)
    system = assemble_system(data_mesh, sub, layout, basis, sigma0=spec.background)
    xi_star = rasterize_phantom(spec, data_mesh)
    clean = forward_map(system, xi_star)
    omega = (noise_percent / 100.0) * float(np.abs(clean).max())
    data = clean if omega == 0 else clean + omega * gaussian_noise(seed, clean.shape[0])
    own_id = mesh_id(data_mesh)
    provenance = {
        "seed": int(seed),
        "mesh_id": own_id,
        "noise_percent": float(noise_percent),
        "rng": "pcg64-box-muller",
    }
    if reconstruction_mesh_id is not None and reconstruction_mesh_id == own_id:
        warnings.warn(
            "data mesh equals the reconstruction mesh: the simulated data "
            "commit the inverse crime",
            RuntimeWarning,
        )
        provenance["inverse_crime"] = True
    return MeasurementSet(
        data=data,
        noise_std=omega,
        num_electrodes=layout.count,
        basis_kind=basis.kind,
        provenance=provenance,
    )
