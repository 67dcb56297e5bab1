"""Synthetic ground truth: analytic HDR scenes, a parametric camera response,
and multi-exposure dataset generation.

The scene is a union of soft-edged emissive primitives with radiance spanning
several orders of magnitude, so the multi-exposure LDR stack genuinely needs
a high dynamic range. Ground-truth HDR views are rendered with the exact same
quadrature as the learned renderer (midpoint sampling through `composite`),
which makes them the independent oracle the learned model is judged against.
The ground-truth response curve is gamma + gain + clamp: simple, monotone and
invertible, with 8-bit quantization as the only noise source.
"""

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io as hio
from .errors import InputError
from .render import CameraView, composite, generate_rays, view_pixel_grid

DEFAULT_EXPOSURES = (1.0 / 64.0, 1.0 / 16.0, 1.0 / 4.0, 1.0, 4.0)


@dataclass(frozen=True)
class Primitive:
    """A soft or hard-edged emissive shape.

    shape: "sphere" (center, radius) or "box" (center, half_extents).
    falloff "hard" uses the closed shape (boundary counts as inside);
    "smooth" ramps the density to zero over `falloff_width` with a cubic
    smoothstep, which keeps the field easy to fit.
    """

    shape: str
    center: tuple
    density: float
    radiance: tuple
    radius: float = 0.0
    half_extents: tuple = ()
    falloff: str = "smooth"
    falloff_width: float = 0.1

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise InputError(f"unknown primitive shape {self.shape!r}")
        if self.shape == "sphere" and not self.radius > 0:
            raise InputError("sphere needs a positive radius")
        if self.shape == "box" and len(self.half_extents) != 3:
            raise InputError("box needs 3 half extents")
        if self.falloff not in ("hard", "smooth"):
            raise InputError(f"unknown falloff {self.falloff!r}")
        if self.falloff == "smooth" and not self.falloff_width > 0:
            raise InputError("smooth falloff needs a positive width")
        if self.density < 0 or min(self.radiance) <= 0:
            raise InputError("density must be >= 0 and radiance > 0")

    def boundary_distance(self, positions: np.ndarray) -> np.ndarray:
        """Negative inside, positive outside (pseudo signed distance)."""
        rel = positions - np.asarray(self.center)
        if self.shape == "sphere":
            return np.linalg.norm(rel, axis=-1) - self.radius
        return np.max(np.abs(rel) - np.asarray(self.half_extents), axis=-1)

    def density_at(self, positions: np.ndarray) -> np.ndarray:
        d = self.boundary_distance(positions)
        if self.falloff == "hard":
            return np.where(d <= 0.0, self.density, 0.0)
        s = np.clip(-d / self.falloff_width, 0.0, 1.0)
        return self.density * s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class CameraArc:
    """Forward-facing look-at cameras on a spherical arc around the scene."""

    radius: float = 2.6
    arc_degrees: float = 70.0
    elevation_degrees: tuple = (6.0, 24.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov_degrees: float = 45.0
    near: float = 1.2
    far: float = 4.2


@dataclass(frozen=True)
class SceneSpec:
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    primitives: tuple = ()
    ambient_density: float = 0.0
    floor_radiance: float = 1e-4
    camera: CameraArc = field(default_factory=CameraArc)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        prims = tuple(Primitive(**p) for p in data.pop("primitives", ()))
        cam = CameraArc(**data.pop("camera", {}))
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown scene keys: {sorted(unknown)}")
        return cls(primitives=prims, camera=cam, **data)

    def radiance_span(self) -> float:
        if not self.primitives:
            return 1.0
        values = np.concatenate([np.asarray(p.radiance, dtype=np.float64) for p in self.primitives])
        return float(values.max() / values.min())


def default_scene() -> SceneSpec:
    """The shipped desk-scale scene: four soft emitters spanning ~3 decades."""
    return SceneSpec(
        primitives=(
            Primitive("sphere", (0.45, 0.30, -0.25), 30.0, (22.0, 18.0, 11.0), radius=0.22, falloff_width=0.08),
            Primitive("sphere", (-0.40, 0.05, 0.20), 14.0, (0.9, 1.15, 1.5), radius=0.32, falloff_width=0.10),
            Primitive("sphere", (0.05, -0.05, 0.42), 22.0, (0.10, 0.32, 0.12), radius=0.16, falloff_width=0.07),
            Primitive("box", (0.0, -0.55, 0.0), 12.0, (0.045, 0.030, 0.020),
                      half_extents=(0.8, 0.14, 0.6), falloff_width=0.10),
        ),
    )


def scene_field(spec: SceneSpec, positions) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth radiance and density at positions [m, 3] (or one point).

    Density is the max over primitive contributions; radiance comes from the
    dominating primitive. Outside everything: floor radiance and the ambient
    density.
    """
    pts = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    m = pts.shape[0]
    if not spec.primitives:
        return np.full((m, 3), spec.floor_radiance), np.full(m, spec.ambient_density)
    contributions = np.stack([p.density_at(pts) for p in spec.primitives])  # [p, m]
    best = np.argmax(contributions, axis=0)
    sigma = contributions[best, np.arange(m)]
    radiances = np.stack([np.asarray(p.radiance, dtype=np.float64) for p in spec.primitives])
    e = radiances[best]
    outside = sigma <= 0.0
    e[outside] = spec.floor_radiance
    sigma = np.where(outside, spec.ambient_density, sigma)
    return e, sigma


# ---------------------------------------------------------------------------
# ground-truth camera response


@dataclass(frozen=True)
class GroundTruthCrf:
    """Gamma + gain response with clamping and 8-bit quantization."""

    gamma: float = 2.2
    gain: float = 0.5 ** 2.2
    bits: int = 8

    def __post_init__(self):
        if self.gamma <= 0 or self.gain <= 0:
            raise InputError("gamma and gain must be positive")
        if self.bits != 8:
            raise InputError("only 8-bit quantization is supported")

    def c0(self) -> float:
        """Continuous response at unit exposure (the anchor color)."""
        return float(np.clip(self.gain, 0.0, 1.0) ** (1.0 / self.gamma))

    def curve(self, log_exposure_grid) -> np.ndarray:
        """[n, 4] table (log_exposure, r, g, b); all channels share the curve."""
        x = np.asarray(log_exposure_grid, dtype=np.float64).reshape(-1)
        color = np.clip(self.gain * np.exp(x), 0.0, 1.0) ** (1.0 / self.gamma)
        return np.column_stack([x, color, color, color])

    def log_exposure_of_color(self, color) -> np.ndarray:
        """Inverse of the continuous curve on (0, 1): gamma*ln(c) - ln(gain)."""
        c = np.asarray(color, dtype=np.float64)
        if np.any(c <= 0) or np.any(c >= 1):
            raise InputError("inverse response is defined on colors strictly inside (0, 1)")
        return self.gamma * np.log(c) - math.log(self.gain)


def apply_crf(hdr_pixel, dt: float, crf: GroundTruthCrf) -> np.ndarray:
    """Simulate the camera: x = gain * H * dt, quantized gamma response.

    Returns uint8 codes with the same shape as the input. Monotone
    non-decreasing in both H and dt.
    """
    if not dt > 0:
        raise InputError(f"exposure time must be positive, got {dt}")
    h = np.asarray(hdr_pixel, dtype=np.float64)
    if np.any(h < 0):
        raise InputError("radiance must be non-negative")
    x = np.clip(crf.gain * h * dt, 0.0, 1.0)
    return np.rint(255.0 * x ** (1.0 / crf.gamma)).astype(np.uint8)


def invert_crf(codes, dt: float, crf: GroundTruthCrf) -> np.ndarray:
    """Undo the (unquantized) response: code/255 -> H, for round-trip checks."""
    z = np.asarray(codes, dtype=np.float64) / 255.0
    return z ** crf.gamma / (crf.gain * dt)


# ---------------------------------------------------------------------------
# ground-truth rendering and dataset emission


def render_gt_hdr(
    spec: SceneSpec,
    view: CameraView,
    near: float,
    far: float,
    n_samples: int = 256,
    chunk: int = 2048,
) -> np.ndarray:
    """Ground-truth HDR image via midpoint quadrature of the analytic scene.

    Uses the identical compositing routine as the learned renderer, so the
    only difference between oracle and model is the field being integrated.
    """
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    pixels = view_pixel_grid(view)
    depths = near + (np.arange(n_samples) + 0.5) / n_samples * (far - near)
    out = np.empty((pixels.shape[0], 3))
    for start in range(0, pixels.shape[0], chunk):
        rays = generate_rays(view, pixels[start : start + chunk], near, far)
        r = len(rays)
        positions = rays.origins[:, None, :] + depths[None, :, None] * rays.directions[:, None, :]
        e, sigma = scene_field(spec, positions.reshape(-1, 3))
        result = composite(
            sigma.reshape(r, n_samples),
            e.reshape(r, n_samples, 3),
            np.broadcast_to(depths, (r, n_samples)),
        )
        out[start : start + r] = result.value
    return out.reshape(view.height, view.width, 3)


def gt_convergence_gap(spec, view, near, far, n_samples, subsample: int = 7) -> float:
    """Max relative pixel change when doubling the sample count (on a pixel
    subgrid); used to flag non-converged ground truth."""
    pixels = view_pixel_grid(view)[::subsample]
    def render(n):
        rays = generate_rays(view, pixels, near, far)
        depths = near + (np.arange(n) + 0.5) / n * (far - near)
        positions = rays.origins[:, None, :] + depths[None, :, None] * rays.directions[:, None, :]
        e, sigma = scene_field(spec, positions.reshape(-1, 3))
        return composite(
            sigma.reshape(len(rays), n),
            e.reshape(len(rays), n, 3),
            np.broadcast_to(depths, (len(rays), n)),
        ).value
    a = render(n_samples)
    b = render(2 * n_samples)
    scale = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def _arc_poses(cam: CameraArc, n_poses: int) -> list[np.ndarray]:
    """Camera-to-world matrices along the arc, looking at the scene center."""
    look_at = np.asarray(cam.look_at, dtype=np.float64)
    up = np.asarray(cam.up, dtype=np.float64)
    azimuths = np.linspace(-0.5 * cam.arc_degrees, 0.5 * cam.arc_degrees, n_poses)
    lo, hi = cam.elevation_degrees
    # two smooth elevation cycles so neighbouring poses are never collinear
    elevations = lo + (hi - lo) * 0.5 * (1.0 + np.sin(np.linspace(0.0, 4.0 * np.pi, n_poses)))
    poses = []
    for az_deg, el_deg in zip(azimuths, elevations):
        az, el = math.radians(az_deg), math.radians(el_deg)
        offset = cam.radius * np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
        position = look_at + offset
        forward = look_at - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        c2w = np.eye(4)
        c2w[:3, 0] = right
        c2w[:3, 1] = true_up
        c2w[:3, 2] = -forward  # camera looks along its -z axis
        c2w[:3, 3] = position
        poses.append(c2w)
    return poses


def _sampling_bbox(spec: SceneSpec, poses, cam: CameraArc, image_size: int, focal: float):
    """Axis-aligned box covering every position rendering can sample.

    Positions are normalized by this box before the periodic encoding, so it
    must contain the whole sampled frustum: outside it, the base frequency
    aliases a point with its period-2 neighbours.
    """
    lo = np.asarray(spec.bbox_min, dtype=np.float64).copy()
    hi = np.asarray(spec.bbox_max, dtype=np.float64).copy()
    edge = image_size - 1
    probe_pixels = [(0, 0), (0, edge), (edge, 0), (edge, edge), (edge // 2, edge // 2)]
    for c2w in poses:
        view = CameraView.from_c2w(c2w, focal, focal, image_size / 2.0, image_size / 2.0,
                                   image_size, image_size, 1.0)
        rays = generate_rays(view, probe_pixels, cam.near, cam.far)
        for s in (cam.near, cam.far):
            pts = rays.origins + s * rays.directions
            lo = np.minimum(lo, pts.min(axis=0))
            hi = np.maximum(hi, pts.max(axis=0))
    margin = 0.05 * (hi - lo)
    return lo - margin, hi + margin


def make_dataset(
    spec: SceneSpec,
    crf: GroundTruthCrf,
    out_dir: str,
    n_poses: int = 35,
    exposure_times=DEFAULT_EXPOSURES,
    image_size: int = 64,
    seed: int = 0,
    train_exposure_indices=(0, 2, 4),
    test_exposure_indices=(2, 3),
    gt_samples: int = 256,
):
    """Emit a dataset directory and return the loaded, validated bundle.

    Poses alternate train/test along the arc. Each training view gets one
    exposure time, assigned as a seeded shuffle of a balanced multiset of the
    requested levels (so every level actually appears). Each test pose gets
    LDR targets at the test exposure levels plus a linear HDR ground-truth
    image. The scene must span at least three orders of magnitude in radiance.
    """
    exposure_times = tuple(float(t) for t in exposure_times)
    if any(t <= 0 for t in exposure_times) or any(
        b <= a for a, b in zip(exposure_times, exposure_times[1:])
    ):
        raise InputError("exposure times must be positive and strictly increasing")
    for idx in (*train_exposure_indices, *test_exposure_indices):
        if not 0 <= idx < len(exposure_times):
            raise InputError(f"exposure index {idx} out of range")
    if n_poses < 3:
        raise InputError("need at least 3 poses for a train/test split")
    if spec.radiance_span() < 1e3:
        raise InputError(
            f"scene radiance spans only {spec.radiance_span():.1f}x; "
            "a genuinely HDR scene needs >= 3 orders of magnitude"
        )

    rng = np.random.default_rng(seed)
    cam = spec.camera
    poses = _arc_poses(cam, n_poses)
    splits = ["train" if i % 2 == 0 else "test" for i in range(n_poses)]
    n_train = splits.count("train")

    levels = list(train_exposure_indices)
    balanced = (levels * math.ceil(n_train / len(levels)))[:n_train]
    train_levels = [balanced[i] for i in rng.permutation(n_train)]

    fov = math.radians(cam.fov_degrees)
    focal = 0.5 * image_size / math.tan(0.5 * fov)
    intrinsics = {
        "fx": focal, "fy": focal,
        "cx": image_size / 2.0, "cy": image_size / 2.0,
        "width": image_size, "height": image_size,
    }

    os.makedirs(out_dir, exist_ok=True)
    views_meta = []
    warnings = []
    train_seen = 0
    for i, (c2w, split) in enumerate(zip(poses, splits)):
        view = CameraView.from_c2w(c2w, focal, focal, image_size / 2.0, image_size / 2.0,
                                   image_size, image_size, 1.0)
        hdr = render_gt_hdr(spec, view, cam.near, cam.far, gt_samples)
        tag = f"p{i:03d}"
        if split == "train":
            level = train_levels[train_seen]
            train_seen += 1
            dt = exposure_times[level]
            file = f"train/{tag}_e{level}.png"
            hio.write_png(os.path.join(out_dir, file), apply_crf(hdr, dt, crf))
            views_meta.append({"file": file, "split": "train",
                               "c2w": [float(x) for x in c2w.reshape(-1)],
                               "exposure_time_s": dt})
        else:
            for level in test_exposure_indices:
                dt = exposure_times[level]
                file = f"test_ldr/{tag}_e{level}.png"
                hio.write_png(os.path.join(out_dir, file), apply_crf(hdr, dt, crf))
                views_meta.append({"file": file, "split": "test",
                                   "c2w": [float(x) for x in c2w.reshape(-1)],
                                   "exposure_time_s": dt})
            hio.write_pfm(os.path.join(out_dir, f"test_hdr/{tag}.pfm"), hdr)

    probe = CameraView.from_c2w(poses[n_poses // 2], focal, focal, image_size / 2.0,
                                image_size / 2.0, image_size, image_size, 1.0)
    gap = gt_convergence_gap(spec, probe, cam.near, cam.far, gt_samples)
    if gap > 0.005:
        warnings.append(f"ground-truth sampling not converged: doubling changes pixels by {gap:.3%}")

    bbox_lo, bbox_hi = _sampling_bbox(spec, poses, cam, image_size, focal)
    meta = {
        "version": hio.META_VERSION,
        "bbox": {"min": bbox_lo.tolist(), "max": bbox_hi.tolist()},
        "near": cam.near,
        "far": cam.far,
        "intrinsics": intrinsics,
        "crf": {"gamma": crf.gamma, "gain": crf.gain},
        "c0_gt": crf.c0(),
        "views": views_meta,
        "exposure_times": list(exposure_times),
        "scene": spec.to_dict(),
        "seed": seed,
        "warnings": warnings,
    }
    hio.save_meta(out_dir, meta)
    return hio.load_dataset(out_dir)
