"""Parametric infill geometry with a seeded manufacturing-error model.

An object is a rectangular box: a solid shell enclosing an infill lattice.
The lattice is realised layer by layer as straight strut segments (centerline
plus extrusion width). Manufacturing variation is injected as seeded jitter
on endpoints, widths and per-layer drift, plus random strut dropout, so two
objects built from the same parameters differ only through their error seeds.

Coordinates are millimetres. The unposed object occupies
[0, X] x [0, Y] x [0, Z]; layers stack along Z and rays (see render) travel
along +Y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .rng import MASK64, Stream

MIN_STRUT_WIDTH = 0.05  # clamp floor for width jitter, mm
_EPS = 1e-9

SQRT2 = math.sqrt(2.0)
SQRT3 = math.sqrt(3.0)


class DensityInfeasibleError(ValueError):
    """Requested density cannot be realised with the given printing width."""


class InfillPattern(Enum):
    LINEAR = "linear"
    DIAMOND_FILL = "diamond_fill"
    HEXAGONAL = "hexagonal"

    @classmethod
    def parse(cls, name: str) -> "InfillPattern":
        """Parse a pattern name; 'honeycomb' is an alias of hexagonal."""
        key = name.strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        table = {
            "linear": cls.LINEAR,
            "diamondfill": cls.DIAMOND_FILL,
            "diamond": cls.DIAMOND_FILL,
            "hexagonal": cls.HEXAGONAL,
            "honeycomb": cls.HEXAGONAL,
        }
        if key not in table:
            raise ValueError(f"unknown infill pattern: {name!r}")
        return table[key]


@dataclass(frozen=True)
class ErrorModel:
    """Per-object manufacturing variation magnitudes.

    Defaults make same-spec objects visually near-identical but statistically
    separable; all fields may be overridden from config.
    """

    sigma_pos: float = 0.05  # endpoint jitter std, mm
    sigma_width: float = 0.02  # strut width jitter std, mm
    sigma_layer: float = 0.02  # per-layer rigid XY drift std, mm
    dropout_prob: float = 0.005  # independent strut dropout probability

    def __post_init__(self):
        if self.sigma_pos < 0 or self.sigma_width < 0 or self.sigma_layer < 0:
            raise ValueError("error sigmas must be >= 0")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")

    def is_zero(self) -> bool:
        return (
            self.sigma_pos == 0.0
            and self.sigma_width == 0.0
            and self.sigma_layer == 0.0
            and self.dropout_prob == 0.0
        )

    @classmethod
    def zero(cls) -> "ErrorModel":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class InfillSpec:
    """Full parametric description of one manufactured object."""

    pattern: InfillPattern
    density: float
    position_offset: tuple[float, float] = (0.0, 0.0)
    layer_thickness: float = 0.2
    printing_width: float = 0.4
    object_size: tuple[float, float, float] = (50.0, 50.0, 50.0)
    shell_thickness: float = 1.2
    error: ErrorModel = field(default_factory=ErrorModel)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must lie in (0, 1]")
        if not 0.05 <= self.layer_thickness <= 1.0:
            raise ValueError("layer_thickness must lie in [0.05, 1.0] mm")
        if not 0.1 <= self.printing_width <= 1.0:
            raise ValueError("printing_width must lie in [0.1, 1.0] mm")
        if self.shell_thickness <= 0:
            raise ValueError("shell_thickness must be positive")
        if any(d <= 2.0 * self.shell_thickness for d in self.object_size):
            raise ValueError("every object dimension must exceed twice the shell thickness")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_json_dict(self) -> dict:
        return {
            "schema": 1,
            "pattern": self.pattern.value,
            "density": self.density,
            "position_offset": list(self.position_offset),
            "layer_thickness": self.layer_thickness,
            "printing_width": self.printing_width,
            "object_size": list(self.object_size),
            "shell_thickness": self.shell_thickness,
            "error": {
                "sigma_pos": self.error.sigma_pos,
                "sigma_width": self.error.sigma_width,
                "sigma_layer": self.error.sigma_layer,
                "dropout_prob": self.error.dropout_prob,
            },
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "InfillSpec":
        if doc.get("schema") != 1:
            raise ValueError("unsupported or missing spec schema (expected 1)")
        known = {
            "schema", "pattern", "density", "position_offset", "layer_thickness",
            "printing_width", "object_size", "shell_thickness", "error", "seed",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        err = doc.get("error", {})
        unknown_err = set(err) - {"sigma_pos", "sigma_width", "sigma_layer", "dropout_prob"}
        if unknown_err:
            raise ValueError(f"unknown error fields: {sorted(unknown_err)}")
        defaults = cls.__dataclass_fields__
        return cls(
            pattern=InfillPattern.parse(doc["pattern"]),
            density=float(doc["density"]),
            position_offset=tuple(float(v) for v in doc.get("position_offset", (0.0, 0.0))),
            layer_thickness=float(doc.get("layer_thickness", defaults["layer_thickness"].default)),
            printing_width=float(doc.get("printing_width", defaults["printing_width"].default)),
            object_size=tuple(float(v) for v in doc.get("object_size", (50.0, 50.0, 50.0))),
            shell_thickness=float(doc.get("shell_thickness", defaults["shell_thickness"].default)),
            error=ErrorModel(
                sigma_pos=float(err.get("sigma_pos", 0.05)),
                sigma_width=float(err.get("sigma_width", 0.02)),
                sigma_layer=float(err.get("sigma_layer", 0.02)),
                dropout_prob=float(err.get("dropout_prob", 0.005)),
            ),
            seed=int(doc.get("seed", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "InfillSpec":
        return cls.from_json_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "InfillSpec":
        return cls.from_json(Path(path).read_text())

    def with_seed(self, seed: int) -> "InfillSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class Pose:
    """Rigid 2D pose: rotation about the object footprint center, then translation."""

    translation: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0  # degrees about +Z, normalised to [0, 360)

    def __post_init__(self):
        object.__setattr__(self, "rotation", self.rotation % 360.0)
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    def inverse(self) -> "Pose":
        return Pose((-self.translation[0], -self.translation[1]), -self.rotation)

    def is_identity(self) -> bool:
        return self.rotation == 0.0 and self.translation == (0.0, 0.0)


IDENTITY_POSE = Pose()


@dataclass(frozen=True)
class Shell:
    """Axis-aligned box walls, stored as an oriented rectangle footprint."""

    center: tuple[float, float]  # footprint center, world mm
    half_size: tuple[float, float]  # outer half extents before rotation
    rotation: float  # degrees
    thickness: float
    height: float  # Z extent

    def __post_init__(self):
        if self.thickness <= 0 or self.height <= 0:
            raise ValueError("shell thickness and height must be positive")
        if min(self.half_size) <= self.thickness or self.height <= 2.0 * self.thickness:
            raise ValueError("shell walls would overlap: extents must exceed the thickness")

    @property
    def inner_half_size(self) -> tuple[float, float]:
        return (self.half_size[0] - self.thickness, self.half_size[1] - self.thickness)

    def footprint_extent(self) -> tuple[float, float]:
        """Axis-aligned half extents of the rotated outer footprint."""
        th = math.radians(self.rotation)
        c, s = abs(math.cos(th)), abs(math.sin(th))
        hx, hy = self.half_size
        return (hx * c + hy * s, hx * s + hy * c)

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        """World (n,2) points into the unrotated shell frame centred at origin."""
        th = math.radians(self.rotation)
        c, s = math.cos(th), math.sin(th)
        d = pts - np.asarray(self.center)
        return np.column_stack((c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]))


@dataclass
class Layer:
    """One printed layer: z slab plus strut segments.

    ``struts`` is a read-only (n, 5) float64 array with rows
    (x0, y0, x1, y1, width).
    """

    z_low: float
    z_high: float
    struts: np.ndarray

    def __post_init__(self):
        self.struts = np.asarray(self.struts, dtype=np.float64).reshape(-1, 5)
        self.struts.setflags(write=False)
        if self.z_high <= self.z_low:
            raise ValueError("layer must have positive height")
        if self.struts.shape[0] and np.any(self.struts[:, 4] <= 0):
            raise ValueError("strut widths must be positive")


@dataclass
class SliceGeometry:
    """Realised per-layer struts plus the enclosing shell."""

    layers: list[Layer]
    shell: Shell

    def __post_init__(self):
        if not self.layers:
            raise ValueError("geometry requires at least one layer")
        z = 0.0
        for lay in self.layers:
            if abs(lay.z_low - z) > _EPS:
                raise ValueError("layers must tile contiguously from z=0")
            z = lay.z_high
        if abs(z - self.shell.height) > _EPS:
            raise ValueError("layers must tile the full shell height")

    @property
    def z_extent(self) -> float:
        return self.layers[-1].z_high

    def strut_count(self) -> int:
        return sum(lay.struts.shape[0] for lay in self.layers)

    def layer_index_at(self, z: float) -> int | None:
        """Index of the layer containing height z (half-open slabs), or None."""
        if z < 0.0 or z >= self.z_extent:
            return None
        idx = min(int(np.searchsorted(self._z_highs(), z, side="right")), len(self.layers) - 1)
        return idx

    def _z_highs(self) -> np.ndarray:
        return np.array([lay.z_high for lay in self.layers])


def _clip_segments(segs: np.ndarray, hx: float, hy: float) -> tuple[np.ndarray, np.ndarray]:
    """Liang-Barsky clip of (n,4) centreline segments to [-hx,hx] x [-hy,hy].

    Returns (clipped segments, survivor mask into the input); zero-length
    leftovers are dropped.
    """
    if segs.shape[0] == 0:
        return segs.reshape(0, 4), np.zeros(0, dtype=bool)
    p0 = segs[:, 0:2]
    d = segs[:, 2:4] - p0
    t0 = np.zeros(len(segs))
    t1 = np.ones(len(segs))
    keep = np.ones(len(segs), dtype=bool)
    for axis, h in ((0, hx), (1, hy)):
        for sign in (-1.0, 1.0):
            # half-plane: sign * coord <= h
            num = h - sign * p0[:, axis]
            den = sign * d[:, axis]
            parallel = den == 0.0
            keep &= ~(parallel & (num < 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                t = num / den
            entering = den < 0.0
            t0 = np.where(~parallel & entering, np.maximum(t0, t), t0)
            t1 = np.where(~parallel & ~entering, np.minimum(t1, t), t1)
    keep &= t1 - t0 > _EPS
    q0 = p0 + t0[:, None] * d
    q1 = p0 + t1[:, None] * d
    return np.column_stack((q0, q1))[keep], keep


def _diagonal_family(hx: float, hy: float, spacing: float, phase: float, slope: int) -> np.ndarray:
    """Centreline segments of one +-45 degree stripe family inside the
    rectangle [-hx,hx] x [-hy,hy].

    Lines satisfy (x - y)/sqrt(2) = c (slope +1) or (x + y)/sqrt(2) = c
    (slope -1) for c = phase + k*spacing. ``spacing`` is the perpendicular
    line pitch.
    """
    c_lo, c_hi = (-hx - hy) / SQRT2, (hx + hy) / SQRT2
    k_lo = math.ceil((c_lo - phase) / spacing - 1e-12)
    k_hi = math.floor((c_hi - phase) / spacing + 1e-12)
    if k_hi < k_lo:
        return np.zeros((0, 4))
    cs = phase + spacing * np.arange(k_lo, k_hi + 1)
    segs = []
    for c in cs:
        cc = SQRT2 * c
        if slope == +1:
            # y = t - cc, x = t
            t0, t1 = max(-hx, -hy + cc), min(hx, hy + cc)
            if t1 - t0 > _EPS:
                segs.append((t0, t0 - cc, t1, t1 - cc))
        else:
            # y = cc - t, x = t
            t0, t1 = max(-hx, cc - hy), min(hx, cc + hy)
            if t1 - t0 > _EPS:
                segs.append((t0, cc - t0, t1, cc - t1))
    return np.array(segs) if segs else np.zeros((0, 4))


def _hex_cells(hx: float, hy: float, edge: float, off: tuple[float, float]) -> np.ndarray:
    """Wall segments of a flat-top hexagon tiling covering the rectangle.

    Cell centers sit at (off_x + 1.5*edge*col, off_y + sqrt3*edge*row +
    sqrt3/2*edge*(col odd)). Shared walls are emitted once.
    """
    ca = 1.5 * edge
    ra = SQRT3 * edge
    margin = 2.0 * edge
    col_lo = math.floor((-hx - margin - off[0]) / ca)
    col_hi = math.ceil((hx + margin - off[0]) / ca)
    verts = edge * np.array(
        [(math.cos(math.radians(60 * k)), math.sin(math.radians(60 * k))) for k in range(6)]
    )
    seen: set[tuple[int, int, int, int]] = set()
    segs: list[tuple[float, float, float, float]] = []
    for col in range(col_lo, col_hi + 1):
        cx = off[0] + ca * col
        row_shift = 0.5 * ra if (col % 2) else 0.0
        row_lo = math.floor((-hy - margin - off[1] - row_shift) / ra)
        row_hi = math.ceil((hy + margin - off[1] - row_shift) / ra)
        for row in range(row_lo, row_hi + 1):
            cy = off[1] + ra * row + row_shift
            for k in range(6):
                a = (cx + verts[k, 0], cy + verts[k, 1])
                b = (cx + verts[(k + 1) % 6, 0], cy + verts[(k + 1) % 6, 1])
                ka = (round(a[0] * 1e6), round(a[1] * 1e6))
                kb = (round(b[0] * 1e6), round(b[1] * 1e6))
                key = ka + kb if ka <= kb else kb + ka
                if key in seen:
                    continue
                seen.add(key)
                segs.append((a[0], a[1], b[0], b[1]))
    return np.array(segs) if segs else np.zeros((0, 4))


def strut_spacing(spec: InfillSpec) -> float:
    """Characteristic lattice pitch: stripe pitch for line patterns, cell
    edge length for hexagons.

    Line patterns: a stripe family of width w at pitch d has solid fraction
    w/d, so d = w/density for the single family of a linear layer and
    d = 2w/density per family when two families share a layer. Hexagons: a
    cell of edge a owns walls of area 3*a*w against cell area 3*sqrt3/2*a^2,
    giving a = 2w / (sqrt3 * density).
    """
    w, rho = spec.printing_width, spec.density
    if spec.pattern is InfillPattern.LINEAR:
        d = w / rho
    elif spec.pattern is InfillPattern.DIAMOND_FILL:
        d = 2.0 * w / rho
    else:
        d = 2.0 * w / (SQRT3 * rho)
    if d <= w + _EPS:
        raise DensityInfeasibleError(
            f"density {rho} infeasible: derived spacing {d:.4f} mm does not exceed "
            f"printing width {w} mm"
        )
    return d


def lattice_periods(spec: InfillSpec) -> tuple[float, float]:
    """Axis-aligned periods of the lattice; position offsets wrap modulo these."""
    d = strut_spacing(spec)
    if spec.pattern is InfillPattern.HEXAGONAL:
        return (3.0 * d, SQRT3 * d)
    return (SQRT2 * d, SQRT2 * d)


def _wrapped_offset(spec: InfillSpec) -> tuple[float, float]:
    px, py = lattice_periods(spec)
    return (spec.position_offset[0] % px, spec.position_offset[1] % py)


def _layer_edges(height: float, layer_thickness: float) -> np.ndarray:
    count = max(1, round(height / layer_thickness))
    return height * np.arange(count + 1) / count


def generate_infill(spec: InfillSpec) -> SliceGeometry:
    """Realise the spec: ideal lattice clipped to the shell interior, then
    manufacturing errors from (spec.error, spec.seed).

    The lattice is anchored at the footprint center, shifted by the wrapped
    position offset. Linear alternates +-45 degrees between layers,
    diamond fill lays both families in every layer, hexagonal repeats the
    same cell tiling in every layer.
    """
    x_sz, y_sz, z_sz = spec.object_size
    shell = Shell(
        center=(x_sz / 2.0, y_sz / 2.0),
        half_size=(x_sz / 2.0, y_sz / 2.0),
        rotation=0.0,
        thickness=spec.shell_thickness,
        height=z_sz,
    )
    hx, hy = shell.inner_half_size
    d = strut_spacing(spec)
    off = _wrapped_offset(spec)
    w = spec.printing_width

    # stripe families straddle the footprint center at +-d/2 so that in the
    # density->0 limit (d beyond the object extent) no line crosses the interior
    if spec.pattern is InfillPattern.HEXAGONAL:
        base, _ = _clip_segments(_hex_cells(hx, hy, d, off), hx, hy)
        per_layer = [base]
    elif spec.pattern is InfillPattern.DIAMOND_FILL:
        plus = _diagonal_family(hx, hy, d, d / 2.0 + (off[0] - off[1]) / SQRT2, +1)
        minus = _diagonal_family(hx, hy, d, d / 2.0 + (off[0] + off[1]) / SQRT2, -1)
        per_layer = [np.vstack((plus, minus)) if plus.size or minus.size else np.zeros((0, 4))]
    else:
        plus = _diagonal_family(hx, hy, d, d / 2.0 + (off[0] - off[1]) / SQRT2, +1)
        minus = _diagonal_family(hx, hy, d, d / 2.0 + (off[0] + off[1]) / SQRT2, -1)
        per_layer = [plus, minus]

    edges = _layer_edges(z_sz, spec.layer_thickness)
    cx, cy = shell.center
    layers = []
    for i in range(len(edges) - 1):
        segs = per_layer[i % len(per_layer)]
        world = segs + np.array([cx, cy, cx, cy]) if segs.shape[0] else segs
        struts = np.column_stack((world, np.full(world.shape[0], w))) if world.shape[0] else np.zeros((0, 5))
        layers.append(Layer(z_low=float(edges[i]), z_high=float(edges[i + 1]), struts=struts))

    geom = SliceGeometry(layers=layers, shell=shell)
    return apply_errors(geom, spec.error, spec.seed)


def apply_errors(geom: SliceGeometry, error: ErrorModel, seed: int) -> SliceGeometry:
    """Perturb a geometry with seeded manufacturing errors.

    The all-zero model is a fixed point and consumes no randomness. Otherwise
    one stream seeded by ``seed`` is consumed in a fixed order per layer:
    2 normals (layer drift), then 4 normals per strut (endpoint jitter,
    strut-major), then 1 normal per strut (width), then 1 uniform per strut
    (dropout). Struts are re-clipped to the shell interior afterwards.
    """
    if error.is_zero():
        return geom
    stream = Stream(seed)
    shell = geom.shell
    hx, hy = shell.inner_half_size
    out_layers = []
    for lay in geom.layers:
        n = lay.struts.shape[0]
        shift = stream.normal(2) * error.sigma_layer
        if n == 0:
            out_layers.append(Layer(lay.z_low, lay.z_high, lay.struts))
            continue
        jit = stream.normal(4 * n).reshape(n, 4) * error.sigma_pos
        wjit = stream.normal(n) * error.sigma_width
        u = stream.uniform(n)
        segs = lay.struts[:, :4] + jit + np.array([shift[0], shift[1], shift[0], shift[1]])
        widths = np.maximum(lay.struts[:, 4] + wjit, MIN_STRUT_WIDTH)
        survive = u >= error.dropout_prob
        segs, widths = segs[survive], widths[survive]
        # clip in the shell's local frame so rotated geometry stays contained
        local = np.hstack((shell.to_local(segs[:, 0:2]), shell.to_local(segs[:, 2:4])))
        kept, mask = _clip_segments(local, hx, hy)
        th = math.radians(shell.rotation)
        c, s = math.cos(th), math.sin(th)
        rot = np.array([[c, -s], [s, c]])
        p0 = kept[:, 0:2] @ rot.T + np.asarray(shell.center)
        p1 = kept[:, 2:4] @ rot.T + np.asarray(shell.center)
        out_layers.append(Layer(lay.z_low, lay.z_high, np.column_stack((p0, p1, widths[mask]))))
    return SliceGeometry(layers=out_layers, shell=shell)


def transform(geom: SliceGeometry, pose: Pose) -> SliceGeometry:
    """Rigid 2D transform: rotate about the current footprint center, then
    translate. Z structure is untouched."""
    if pose.is_identity():
        return geom
    cx, cy = geom.shell.center
    th = math.radians(pose.rotation)
    c, s = math.cos(th), math.sin(th)
    tx, ty = pose.translation
    shell = Shell(
        center=(cx + tx, cy + ty),
        half_size=geom.shell.half_size,
        rotation=(geom.shell.rotation + pose.rotation) % 360.0,
        thickness=geom.shell.thickness,
        height=geom.shell.height,
    )
    out_layers = []
    for lay in geom.layers:
        if lay.struts.shape[0] == 0:
            out_layers.append(Layer(lay.z_low, lay.z_high, lay.struts))
            continue
        seg = lay.struts[:, :4]
        x0 = seg[:, 0] - cx
        y0 = seg[:, 1] - cy
        x1 = seg[:, 2] - cx
        y1 = seg[:, 3] - cy
        nseg = np.column_stack(
            (
                c * x0 - s * y0 + cx + tx,
                s * x0 + c * y0 + cy + ty,
                c * x1 - s * y1 + cx + tx,
                s * x1 + c * y1 + cy + ty,
            )
        )
        out_layers.append(Layer(lay.z_low, lay.z_high, np.column_stack((nseg, lay.struts[:, 4]))))
    return SliceGeometry(layers=out_layers, shell=shell)


def write_struts(geom: SliceGeometry, path: str | Path) -> None:
    """Line-oriented strut export: ``layer_index x0 y0 x1 y1 width``.

    Floats are written with repr precision so a read-back is bit-exact.
    Lines starting with '#' are comments.
    """
    lines = ["# printid strut export: layer_index x0 y0 x1 y1 width"]
    for i, lay in enumerate(geom.layers):
        for row in lay.struts:
            vals = " ".join(repr(float(v)) for v in row)
            lines.append(f"{i} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_struts(path: str | Path) -> list[tuple[int, float, float, float, float, float]]:
    """Parse a strut export back into (layer_index, x0, y0, x1, y1, width) rows."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"malformed strut line: {line!r}")
        rows.append((int(parts[0]),) + tuple(float(v) for v in parts[1:]))
    return rows


def strut_table(geom: SliceGeometry) -> list[tuple[int, float, float, float, float, float]]:
    """The geometry's struts in export order, matching read_struts output."""
    rows = []
    for i, lay in enumerate(geom.layers):
        for row in lay.struts:
            rows.append((i, float(row[0]), float(row[1]), float(row[2]), float(row[3]), float(row[4])))
    return rows
