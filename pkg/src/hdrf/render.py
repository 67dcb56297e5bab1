"""Ray generation, sampling and volume compositing.

Rendering integrates per-sample contributions along camera rays using the
standard absorption quadrature: alpha_i = 1 - exp(-sigma_i * delta_i),
transmittance T_i = prod_{j<i} (1 - alpha_j), weight w_i = T_i * alpha_i.
The LDR path tone maps each sample before compositing; the HDR path
composites linear radiance exp(log_radiance) with no tone mapping.
Transmittance left after the last sample falls onto a black background.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .encoding import positional_encode
from .errors import DegenerateError, InputError
from .model import ModelBundle, dense, field_forward, tone_map

TERMINAL_DELTA = 1e10


@dataclass(frozen=True)
class CameraView:
    """A posed pinhole camera with an exposure time."""

    rotation: np.ndarray  # camera-to-world, columns are camera axes
    translation: np.ndarray  # camera center in world coordinates
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    exposure_time_s: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InputError("rotation must be 3x3 and translation a 3-vector")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise InputError("rotation is not orthonormal (tolerance 1e-6)")
        if not self.exposure_time_s > 0:
            raise InputError(f"exposure time must be positive, got {self.exposure_time_s}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def c2w(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_c2w(cls, c2w, fx, fy, cx, cy, width, height, exposure_time_s) -> "CameraView":
        c2w = np.asarray(c2w, dtype=np.float64).reshape(4, 4)
        return cls(c2w[:3, :3], c2w[:3, 3], fx, fy, cx, cy, width, height, exposure_time_s)


@dataclass
class Rays:
    """A batch of rays: origins, unit directions and near/far bounds."""

    origins: np.ndarray  # [n, 3]
    directions: np.ndarray  # [n, 3]
    near: np.ndarray  # [n]
    far: np.ndarray  # [n]

    def __post_init__(self):
        self.origins = np.ascontiguousarray(self.origins, dtype=np.float64)
        self.directions = np.ascontiguousarray(self.directions, dtype=np.float64)
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (len(self),)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (len(self),)).copy()
        if np.any(self.near >= self.far):
            raise InputError("rays need near < far")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise InputError("ray directions must be unit vectors (tolerance 1e-6)")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, index) -> "Rays":
        index = np.atleast_1d(index)
        return Rays(self.origins[index], self.directions[index], self.near[index], self.far[index])


def generate_rays(view: CameraView, pixels, near: float, far: float) -> Rays:
    """Rays through pixel centers of (row, col) pairs, in world coordinates."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if px.shape[1] != 2:
        raise InputError(f"pixels must be (row, col) pairs, got shape {px.shape}")
    rows, cols = px[:, 0], px[:, 1]
    if np.any(rows < 0) or np.any(rows >= view.height) or np.any(cols < 0) or np.any(cols >= view.width):
        raise InputError("pixel outside image bounds")
    dirs_cam = np.stack(
        [
            (cols + 0.5 - view.cx) / view.fx,
            -(rows + 0.5 - view.cy) / view.fy,
            -np.ones_like(cols),
        ],
        axis=1,
    )
    dirs_world = dirs_cam @ view.rotation.T
    dirs_world /= np.linalg.norm(dirs_world, axis=1, keepdims=True)
    origins = np.broadcast_to(view.translation, dirs_world.shape)
    return Rays(origins, dirs_world, near, far)


def view_pixel_grid(view: CameraView) -> np.ndarray:
    """All (row, col) pairs of a view in row-major order."""
    rows, cols = np.meshgrid(np.arange(view.height), np.arange(view.width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


# ---------------------------------------------------------------------------
# depth sampling


def stratified_sample(rays: Rays, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """One depth per equal-width bin of [near, far]; jittered when rng given.

    With rng=None the bin midpoints are returned (deterministic evaluation
    mode). Output is sorted ascending along the last axis, shape [rays, n].
    """
    if n < 1:
        raise InputError(f"sample count must be >= 1, got {n}")
    r = len(rays)
    span = (rays.far - rays.near)[:, None]
    lo = rays.near[:, None] + span * (np.arange(n) / n)
    width = span / n
    u = rng.random((r, n)) if rng is not None else 0.5
    return lo + u * width


def hierarchical_sample(
    bin_edges,
    weights,
    n: int,
    rng: np.random.Generator | None,
    floor: float = 1e-5,
) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant density (weights + floor).

    bin_edges: [rays, bins + 1] (or a shared 1-d edge vector); weights >= 0,
    [rays, bins]. With rng=None, stratified midpoints of the unit interval are
    mapped through the CDF instead (deterministic). Output sorted, [rays, n].
    """
    if n < 1:
        raise InputError(f"sample count must be >= 1, got {n}")
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if np.any(weights < 0):
        raise InputError("weights must be non-negative")
    r, bins = weights.shape
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim == 1:
        edges = np.broadcast_to(edges, (r, edges.size))
    if edges.shape != (r, bins + 1):
        raise InputError(f"bin_edges shape {edges.shape} does not match weights {weights.shape}")
    mass = weights + floor
    totals = mass.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise DegenerateError("all-zero weights with no floor leave nothing to sample")
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(mass / totals, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (r, n)).copy()
    else:
        u = rng.random((r, n))

    # one flat searchsorted across rows: offset each row into a disjoint range
    offs = 2.0 * np.arange(r)[:, None]
    flat = (cdf + offs).ravel()
    idx = np.searchsorted(flat, (u + offs).ravel(), side="right").reshape(r, n)
    idx = np.clip(idx - 1 - np.arange(r)[:, None] * (bins + 1), 0, bins - 1)
    row = np.arange(r)[:, None]
    lo, hi = cdf[row, idx], cdf[row, idx + 1]
    denom = np.where(hi - lo < 1e-12, 1.0, hi - lo)
    t = (u - lo) / denom
    depths = edges[row, idx] + t * (edges[row, idx + 1] - edges[row, idx])
    return np.sort(depths, axis=1)


# ---------------------------------------------------------------------------
# compositing


@dataclass
class CompositeOutput:
    """Per-sample quadrature weights and the accumulated ray value."""

    value: np.ndarray  # [rays, channels]
    weights: np.ndarray  # [rays, samples]
    transmittance: np.ndarray  # [rays, samples], before each sample
    t_final: np.ndarray  # [rays], leftover transmittance
    opacity: np.ndarray  # [rays]
    depth: np.ndarray  # [rays], weight-averaged sample depth


def _deltas(depths: np.ndarray, terminal_delta: float) -> np.ndarray:
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = terminal_delta
    return deltas


def _validate_composite(sigmas, depths):
    if np.any(np.diff(depths, axis=1) < 0):
        raise InputError("depths must be sorted ascending")
    if np.any(sigmas < 0):
        raise InputError("densities must be non-negative")


def composite(sigmas, values, depths, terminal_delta: float = TERMINAL_DELTA) -> CompositeOutput:
    """Plain (non-differentiated) compositing; accepts one ray or a batch."""
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    depths = np.atleast_2d(np.asarray(depths, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None, :, :]
    if sigmas.shape != depths.shape or values.shape[:2] != sigmas.shape:
        raise InputError(
            f"composite shapes disagree: sigma {sigmas.shape}, values {values.shape}, depths {depths.shape}"
        )
    _validate_composite(sigmas, depths)
    out, weights, trans, tlast = kernels.composite_forward(sigmas, values, _deltas(depths, terminal_delta))
    return CompositeOutput(
        value=out,
        weights=weights,
        transmittance=trans,
        t_final=tlast,
        opacity=weights.sum(axis=1),
        depth=(weights * depths).sum(axis=1),
    )


def composite_op(
    sigma: Tensor,
    values: Tensor,
    depths: np.ndarray,
    terminal_delta: float = TERMINAL_DELTA,
) -> tuple[Tensor, CompositeOutput]:
    """Taped compositing: gradients flow to sigma [r, s] and values [r, s, c]."""
    _validate_composite(sigma.data, depths)
    deltas = _deltas(depths, terminal_delta)
    out, weights, trans, tlast = kernels.composite_forward(sigma.data, values.data, deltas)
    out_t = Tensor(out, sigma.requires_grad or values.requires_grad, _validate=False)

    def backward(g):
        d_sigma, d_values = kernels.composite_backward(values.data, deltas, weights, trans, tlast, g)
        return (
            d_sigma if sigma.requires_grad else None,
            d_values if values.requires_grad else None,
        )

    ad.record(out_t, (sigma, values), backward)
    aux = CompositeOutput(
        value=out,
        weights=weights,
        transmittance=trans,
        t_final=tlast,
        opacity=weights.sum(axis=1),
        depth=(weights * depths).sum(axis=1),
    )
    return out_t, aux


# ---------------------------------------------------------------------------
# full ray rendering


def _encode_positions(bundle: ModelBundle, rays: Rays, depths: np.ndarray) -> np.ndarray:
    enc = bundle.config.encoding
    positions = rays.origins[:, None, :] + depths[:, :, None] * rays.directions[:, None, :]
    return positional_encode(
        bundle.normalize_positions(positions.reshape(-1, 3)), enc.levels_position, enc.include_input
    )


def _encode_directions(bundle: ModelBundle, rays: Rays, s: int) -> np.ndarray:
    enc = bundle.config.encoding
    denc = positional_encode(rays.directions, enc.levels_direction, enc.include_input)
    return np.repeat(denc, s, axis=0)


def _stage(bundle, which, rays, depths, ln_dt, mode, want_values=True, penc=None):
    """Field eval + per-sample value + composite for one model stage.

    The last sample's interval extends one mean bin width past the far bound
    rather than the huge absorb-everything distance: leftover transmittance
    then falls onto the black background, so empty rays only need a small
    density instead of a vanishing one (or a phantom dark surface).
    """
    r, s = depths.shape
    terminal = float(np.mean(rays.far - rays.near)) / s
    if penc is None:
        penc = _encode_positions(bundle, rays, depths)
    denc = _encode_directions(bundle, rays, s)
    field = bundle.field(which)
    if not want_values:
        # density only (drives importance sampling when values are not needed)
        h = Tensor(penc, _validate=False)
        for w, b in field.trunk:
            h = dense(h, w, b, kernels.ACT_RELU)
        sigma = dense(h, field.sigma_w, field.sigma_b, kernels.ACT_SOFTPLUS)
        zeros = Tensor(np.zeros((r, s, 3)), _validate=False)
        _, aux = composite_op(ad.reshape(sigma, (r, s)), zeros, depths, terminal_delta=terminal)
        return None, aux
    ln_e, sigma = field_forward(field, penc, denc)
    if mode == "ldr":
        values = tone_map(bundle.tone_mapper, ln_e, np.repeat(ln_dt, s))
    elif mode == "hdr":
        values = ad.exp(ln_e)
    else:
        raise InputError(f"mode must be 'ldr' or 'hdr', got {mode!r}")
    out, aux = composite_op(ad.reshape(sigma, (r, s)), ad.reshape(values, (r, s, 3)), depths,
                            terminal_delta=terminal)
    return out, aux


def render_rays(
    bundle: ModelBundle,
    rays: Rays,
    ln_dt: np.ndarray | None,
    rng: np.random.Generator | None,
    *,
    mode: str = "ldr",
    n_coarse: int = 32,
    n_importance: int = 32,
    which: str = "fine",
    coarse_values: bool = True,
):
    """Render a ray batch through the coarse (and optionally fine) stage.

    ln_dt: per-ray log exposure time ([rays]) for LDR mode, ignored for HDR.
    rng=None renders deterministically (bin midpoints, stratified inverse-CDF
    positions). Returns {"coarse": (value Tensor | None, CompositeOutput),
    "fine": ...} with "fine" present when which == "fine".
    """
    if mode == "ldr":
        if ln_dt is None:
            raise InputError("LDR rendering needs per-ray log exposure times")
        ln_dt = np.broadcast_to(np.asarray(ln_dt, dtype=np.float64), (len(rays),))
    coarse_depths = stratified_sample(rays, n_coarse, rng)
    want_coarse_values = coarse_values or which == "coarse"
    coarse_penc = _encode_positions(bundle, rays, coarse_depths)
    out = {}
    c_val, c_aux = _stage(
        bundle, "coarse", rays, coarse_depths, ln_dt, mode, want_coarse_values, penc=coarse_penc
    )
    out["coarse"] = (c_val, c_aux)
    if which == "fine":
        span = np.linspace(0.0, 1.0, n_coarse + 1)
        edges = rays.near[:, None] + (rays.far - rays.near)[:, None] * span
        extra = hierarchical_sample(edges, c_aux.weights, n_importance, rng)
        fine_depths = np.sort(np.concatenate([coarse_depths, extra], axis=1), axis=1)
        out["fine"] = _stage(bundle, "fine", rays, fine_depths, ln_dt, mode, True)
    elif which != "coarse":
        raise InputError(f"which must be 'coarse' or 'fine', got {which!r}")
    return out


def render_ldr(
    rays: Rays,
    dt: float,
    bundle: ModelBundle,
    which: str = "fine",
    rng: np.random.Generator | None = None,
    *,
    n_coarse: int = 32,
    n_importance: int = 32,
) -> np.ndarray:
    """LDR colors for a ray batch at one exposure time. Returns [rays, 3]."""
    if not dt > 0:
        raise InputError(f"exposure time must be positive, got {dt}")
    ln_dt = np.full(len(rays), np.log(dt))
    res = render_rays(
        bundle, rays, ln_dt, rng, mode="ldr", n_coarse=n_coarse,
        n_importance=n_importance, which=which, coarse_values=(which == "coarse"),
    )
    return res[which][0].data.copy()


def render_hdr(
    rays: Rays,
    bundle: ModelBundle,
    which: str = "fine",
    rng: np.random.Generator | None = None,
    *,
    n_coarse: int = 32,
    n_importance: int = 32,
) -> np.ndarray:
    """Linear HDR radiance for a ray batch (no tone mapping). Returns [rays, 3]."""
    res = render_rays(
        bundle, rays, None, rng, mode="hdr", n_coarse=n_coarse,
        n_importance=n_importance, which=which, coarse_values=(which == "coarse"),
    )
    return res[which][0].data.copy()


def render_image(
    view: CameraView,
    bundle: ModelBundle,
    near: float,
    far: float,
    mode: str = "ldr",
    dt: float | None = None,
    *,
    n_coarse: int = 32,
    n_importance: int = 32,
    chunk: int = 1024,
) -> np.ndarray:
    """Render a full view with the fine model; deterministic (no jitter).

    LDR mode uses `dt` if given, else the view's exposure time. Returns an
    [height, width, 3] float image (LDR in (0,1), HDR in linear radiance).
    """
    if mode == "ldr":
        dt = view.exposure_time_s if dt is None else dt
        if not dt > 0:
            raise InputError(f"exposure time must be positive, got {dt}")
    pixels = view_pixel_grid(view)
    out = np.empty((pixels.shape[0], 3))
    for start in range(0, pixels.shape[0], chunk):
        rays = generate_rays(view, pixels[start : start + chunk], near, far)
        if mode == "ldr":
            out[start : start + len(rays)] = render_ldr(
                rays, dt, bundle, "fine", None, n_coarse=n_coarse, n_importance=n_importance
            )
        else:
            out[start : start + len(rays)] = render_hdr(
                rays, bundle, "fine", None, n_coarse=n_coarse, n_importance=n_importance
            )
    return out.reshape(view.height, view.width, 3)
