"""Transmission-image rendering via Beer-Lambert attenuation.

One orthographic ray per pixel travels along +Y through the posed geometry.
A point is solid when it lies inside the outer box footprint and either in a
shell slab (bottom/top thickness, side walls) or inside a strut's width-wide
rectangle footprint in the layer containing its height. Each pixel value is

    source * exp(-mu_solid * L_solid - mu_air * L_air)

where L_solid is the length of the ray's intersection with the solid set
(overlapping struts are merged, not double counted) and L_air is the
remaining chord through the object box. Internal multipath is approximated
by a Gaussian PSF applied after attenuation (renormalised kernel, reflective
boundary, which conserves total image energy).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import IDENTITY_POSE, InfillSpec, Pose, SliceGeometry, generate_infill, transform
from .rng import MASK64, Stream

_BIG = 1e30


class FootprintError(ValueError):
    """The posed object does not fit inside the image plane."""


@dataclass(frozen=True)
class OpticalParams:
    mu_solid: float = 0.08  # attenuation per mm of solid material
    mu_air: float = 0.0
    diffusion_sigma: float = 0.0  # Gaussian PSF std, pixels
    source_intensity: float = 1.0

    def __post_init__(self):
        if not self.mu_solid > self.mu_air >= 0.0:
            raise ValueError("require mu_solid > mu_air >= 0")
        if self.diffusion_sigma < 0:
            raise ValueError("diffusion_sigma must be >= 0")
        if not 0.0 < self.source_intensity <= 1.0:
            raise ValueError("source_intensity must lie in (0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "mu_solid": self.mu_solid,
            "mu_air": self.mu_air,
            "diffusion_sigma": self.diffusion_sigma,
            "source_intensity": self.source_intensity,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "OpticalParams":
        unknown = set(doc) - {"mu_solid", "mu_air", "diffusion_sigma", "source_intensity"}
        if unknown:
            raise ValueError(f"unknown optics fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True)
class NoiseModel:
    gaussian_sigma: float = 0.0  # intensity units
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")


class TransmissionImage:
    """W x H grid of normalised intensities in [0, 1]."""

    def __init__(self, intensities: np.ndarray, pixel_pitch: float):
        arr = np.asarray(intensities, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("intensities must be a 2D array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        if pixel_pitch <= 0:
            raise ValueError("pixel_pitch must be positive")
        arr = arr.copy()
        arr.setflags(write=False)
        self.intensities = arr
        self.pixel_pitch = float(pixel_pitch)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    def mean_interior(self, fraction: float = 0.5) -> float:
        """Mean intensity over the centred crop covering ``fraction`` of each axis."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        h, w = self.intensities.shape
        dh = int(round(h * (1.0 - fraction) / 2.0))
        dw = int(round(w * (1.0 - fraction) / 2.0))
        return float(self.intensities[dh : h - dh, dw : w - dw].mean())


def _slab_interval(a: np.ndarray, b: np.ndarray, lo: float | np.ndarray, hi: float | np.ndarray):
    """t-interval where lo <= a + b*t <= hi; empty encoded as t0 > t1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), a.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        r0 = (lo - a) / b
        r1 = (hi - a) / b
    t0 = np.where(b >= 0, r0, r1)
    t1 = np.where(b >= 0, r1, r0)
    inside = (a >= lo) & (a <= hi)
    t0 = np.where(b == 0, np.where(inside, -_BIG, _BIG), t0)
    t1 = np.where(b == 0, np.where(inside, _BIG, -_BIG), t1)
    return t0, t1


def _union_lengths(t0: np.ndarray, t1: np.ndarray) -> np.ndarray:
    """Total length of the union of intervals per row; (m, k) -> (m,)."""
    if t0.shape[1] == 0:
        return np.zeros(t0.shape[0])
    empty = ~(t1 > t0)
    s = np.where(empty, _BIG, t0)
    e = np.where(empty, _BIG, t1)
    order = np.argsort(s, axis=1, kind="stable")
    s = np.take_along_axis(s, order, axis=1)
    e = np.take_along_axis(e, order, axis=1)
    cummax = np.maximum.accumulate(e, axis=1)
    prev = np.concatenate((np.full((s.shape[0], 1), -_BIG), cummax[:, :-1]), axis=1)
    contrib = np.clip(e - np.maximum(s, prev), 0.0, None)
    return contrib.sum(axis=1)


def _box_chords(xs: np.ndarray, shell, half: tuple[float, float]):
    """Chord [t0, t1] of each vertical world line x=xs through the rotated
    box with the given local half extents; t parametrises world y."""
    cx, cy = shell.center
    th = math.radians(shell.rotation)
    c, s = math.cos(th), math.sin(th)
    # local coords of ray point (x, t): lx = c(x-cx) + s(t-cy), ly = -s(x-cx) + c(t-cy)
    ax = c * (xs - cx) - s * cy
    ay = -s * (xs - cx) - c * cy
    u0, u1 = _slab_interval(ax, np.full_like(xs, s), -half[0], half[0])
    v0, v1 = _slab_interval(ay, np.full_like(xs, c), -half[1], half[1])
    return np.maximum(u0, v0), np.minimum(u1, v1)


def _strut_intervals(xs: np.ndarray, struts: np.ndarray):
    """t-intervals of each (ray, strut) chord; (nx,) x (ns,5) -> (nx, ns)."""
    nx, ns = xs.shape[0], struts.shape[0]
    if ns == 0:
        return np.zeros((nx, 0)), np.zeros((nx, 0))
    x0, y0 = struts[:, 0], struts[:, 1]
    ex = struts[:, 2] - x0
    ey = struts[:, 3] - y0
    length = np.hypot(ex, ey)
    ux, uy = ex / length, ey / length
    dx = xs[:, None] - x0[None, :]
    # along-strut coordinate: u = dx*ux + (t - y0)*uy
    au = dx * ux[None, :] - (y0 * uy)[None, :]
    u0, u1 = _slab_interval(au, np.broadcast_to(uy, (nx, ns)), 0.0, np.broadcast_to(length, (nx, ns)))
    # across-strut coordinate: v = -dx*uy + (t - y0)*ux
    av = -dx * uy[None, :] - (y0 * ux)[None, :]
    hw = np.broadcast_to(struts[:, 4] / 2.0, (nx, ns))
    v0, v1 = _slab_interval(av, np.broadcast_to(ux, (nx, ns)), -hw, hw)
    return np.maximum(u0, v0), np.minimum(u1, v1)


def _solid_lengths(geom: SliceGeometry, xs: np.ndarray, zs: np.ndarray):
    """(L_solid, L_object_chord) for the ray grid, shapes (len(zs), len(xs)).

    Shell slabs: z < thickness or z > height - thickness is fully solid
    across the footprint; otherwise solid = outer minus inner walls plus the
    strut footprints of the layer containing z.
    """
    shell = geom.shell
    out0, out1 = _box_chords(xs, shell, shell.half_size)
    in0, in1 = _box_chords(xs, shell, shell.inner_half_size)
    outer_len = np.clip(out1 - out0, 0.0, None)
    inner_valid = in1 > in0
    # wall intervals [out0, in0] and [in1, out1]; rays missing the cavity are
    # solid across the whole outer chord
    wall_a0 = out0
    wall_a1 = np.where(inner_valid, in0, out1)
    wall_b0 = np.where(inner_valid, in1, out1)
    wall_b1 = out1

    height = shell.height
    thick = shell.thickness
    n_rows, n_cols = zs.shape[0], xs.shape[0]
    solid = np.zeros((n_rows, n_cols))
    chord = np.zeros((n_rows, n_cols))

    in_z = (zs >= 0.0) & (zs < height)
    slab = in_z & ((zs < thick) | (zs > height - thick))
    mid = in_z & ~slab
    chord[in_z, :] = outer_len[None, :]
    solid[slab, :] = outer_len[None, :]

    mid_rows = np.nonzero(mid)[0]
    if mid_rows.size:
        z_highs = np.array([lay.z_high for lay in geom.layers])
        layer_idx = np.minimum(
            np.searchsorted(z_highs, zs[mid_rows], side="right"), len(geom.layers) - 1
        )
        for li in np.unique(layer_idx):
            rows = mid_rows[layer_idx == li]
            s0, s1 = _strut_intervals(xs, geom.layers[li].struts)
            t0 = np.hstack((wall_a0[:, None], wall_b0[:, None], s0))
            t1 = np.hstack((wall_a1[:, None], wall_b1[:, None], s1))
            lengths = _union_lengths(t0, t1)
            solid[rows, :] = lengths[None, :]
    return solid, chord


def path_length(geom: SliceGeometry, x: float, z: float) -> float:
    """Length of the +Y ray at horizontal position x and height z inside the
    solid set; rays missing the object return 0."""
    solid, _ = _solid_lengths(geom, np.array([float(x)]), np.array([float(z)]))
    return float(solid[0, 0])


def default_window_center(geom: SliceGeometry) -> tuple[float, float]:
    """Image window anchor: footprint center in x, mid-height in z."""
    return (geom.shell.center[0], geom.shell.height / 2.0)


def render(
    geom: SliceGeometry,
    optics: OpticalParams,
    pose: Pose = IDENTITY_POSE,
    width: int = 256,
    height: int = 256,
    pixel_pitch: float = 0.25,
    window_center: tuple[float, float] | None = None,
) -> TransmissionImage:
    """Render the posed geometry to a transmission image.

    The image window is a fixed world rectangle of ``width x height`` pixels
    at ``pixel_pitch`` mm/pixel, centred on ``window_center`` (default: the
    input geometry's footprint center before the pose is applied, so posed
    translations shift the image content). Raises FootprintError when the
    posed object extends past the window.
    """
    if width < 1 or height < 1 or pixel_pitch <= 0:
        raise ValueError("image dimensions and pixel_pitch must be positive")
    posed = transform(geom, pose)
    wc = window_center if window_center is not None else default_window_center(geom)

    ex, _ = posed.shell.footprint_extent()
    cx = posed.shell.center[0]
    win_hx = width * pixel_pitch / 2.0
    win_hz = height * pixel_pitch / 2.0
    if (
        cx - ex < wc[0] - win_hx
        or cx + ex > wc[0] + win_hx
        or 0.0 < wc[1] - win_hz
        or posed.shell.height > wc[1] + win_hz
    ):
        raise FootprintError("posed object exceeds the image plane footprint")

    xs = wc[0] + (np.arange(width) + 0.5 - width / 2.0) * pixel_pitch
    zs = wc[1] + (height / 2.0 - np.arange(height) - 0.5) * pixel_pitch
    solid, chord = _solid_lengths(posed, xs, zs)
    air = np.clip(chord - solid, 0.0, None)
    img = optics.source_intensity * np.exp(-optics.mu_solid * solid - optics.mu_air * air)
    if optics.diffusion_sigma > 0:
        img = gaussian_filter(img, sigma=optics.diffusion_sigma, mode="reflect")
    return TransmissionImage(np.clip(img, 0.0, 1.0), pixel_pitch)


def render_single_layer(
    thickness: float,
    optics: OpticalParams,
    width: int = 32,
    height: int = 32,
    pixel_pitch: float = 1.0,
) -> TransmissionImage:
    """Render a flat full-frame sheet of the given thickness normal to the
    rays; every pixel equals source * exp(-mu_solid * thickness)."""
    if thickness <= 0:
        raise ValueError("thickness must be positive")
    value = optics.source_intensity * math.exp(-optics.mu_solid * thickness)
    img = np.full((height, width), value)
    if optics.diffusion_sigma > 0:
        img = gaussian_filter(img, sigma=optics.diffusion_sigma, mode="reflect")
    return TransmissionImage(np.clip(img, 0.0, 1.0), pixel_pitch)


def add_noise(img: TransmissionImage, noise: NoiseModel) -> TransmissionImage:
    """Add i.i.d. Gaussian pixel noise from the seeded stream, clamped to [0, 1]."""
    if noise.gaussian_sigma == 0.0:
        return img
    stream = Stream(noise.seed)
    n = stream.normal(img.height * img.width).reshape(img.height, img.width)
    vals = np.clip(img.intensities + noise.gaussian_sigma * n, 0.0, 1.0)
    return TransmissionImage(vals, img.pixel_pitch)


def pose_to_json_dict(pose: Pose) -> dict:
    return {"translation": list(pose.translation), "rotation": pose.rotation}


def pose_from_json_dict(doc: dict) -> Pose:
    unknown = set(doc) - {"translation", "rotation"}
    if unknown:
        raise ValueError(f"unknown pose fields: {sorted(unknown)}")
    tr = doc.get("translation", (0.0, 0.0))
    return Pose((float(tr[0]), float(tr[1])), float(doc.get("rotation", 0.0)))


def render_scene(doc: dict) -> TransmissionImage:
    """Render a JSON scene document: spec + optics + pose + image params.

    ``image.pixel_pitch`` may be omitted, in which case it is chosen so the
    unrotated object fills 80% of the frame width.
    """
    if doc.get("schema", 1) != 1:
        raise ValueError("unsupported scene schema")
    spec = InfillSpec.from_json_dict(doc["spec"])
    optics = OpticalParams.from_json_dict(doc.get("optics", {}))
    pose = pose_from_json_dict(doc.get("pose", {}))
    image = doc.get("image", {})
    width = int(image.get("width", 256))
    height = int(image.get("height", 256))
    pitch = image.get("pixel_pitch")
    if pitch is None:
        pitch = spec.object_size[0] / 0.8 / width
    geom = generate_infill(spec)
    wc = image.get("window_center")
    return render(
        geom, optics, pose, width, height, float(pitch),
        window_center=tuple(wc) if wc is not None else None,
    )


def load_scene(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
