"""Classical nonparametric camera-response recovery from an exposure stack,
in the style of Debevec & Malik's 1997 least-squares formulation.

Given 8-bit codes Z_ij of P pixel sites under J exposure times, solve for a
discrete inverse log-response table g[0..255] (log exposure per code) and the
per-site log irradiances, with hat-function weighting, a second-difference
smoothness prior and the gauge fixed by g[128] = 0. This is the independent
oracle the learned tone mapper is cross-validated against: the learned curve
is anchored by its unit-exposure color instead, so comparisons re-align the
two gauges explicitly before measuring deviations.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InputError, SolveError

Z_MID = 128


def hat_weights() -> np.ndarray:
    """Triangle weights over the 8-bit code range, zero at both extremes."""
    z = np.arange(256, dtype=np.float64)
    w = np.where(z <= 127, z, 255.0 - z)
    return w / 127.0


@dataclass
class ExposureStack:
    """Codes [sites, exposures, 3] (uint8) plus log exposure times [exposures].

    All views behind a stack share one camera pose; recovering a response
    curve needs at least two exposures.
    """

    codes: np.ndarray
    log_exposure_times: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        self.log_exposure_times = np.asarray(self.log_exposure_times, dtype=np.float64)
        if self.codes.ndim != 3 or self.codes.shape[2] != 3:
            raise InputError(f"codes must be [sites, exposures, 3], got {self.codes.shape}")
        if self.codes.shape[1] != self.log_exposure_times.size:
            raise InputError("codes and exposure times disagree on the number of exposures")

    @property
    def n_sites(self) -> int:
        return self.codes.shape[0]

    @property
    def n_exposures(self) -> int:
        return self.codes.shape[1]


@dataclass
class DiscreteCrf:
    """Recovered log exposure per 8-bit code, one column per channel."""

    log_exposure: np.ndarray  # [256, 3]
    smoothness: float

    def channel_curve(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        """(log exposure, color) pairs sorted by log exposure."""
        g = self.log_exposure[:, c]
        order = np.argsort(g, kind="stable")
        return g[order], np.arange(256)[order] / 255.0

    def as_table(self, grid) -> np.ndarray:
        """Resample to the shared [n, 4] (log_exposure, r, g, b) curve format."""
        grid = np.asarray(grid, dtype=np.float64).reshape(-1)
        table = np.empty((grid.size, 4))
        table[:, 0] = grid
        for c in range(3):
            x, y = self.channel_curve(c)
            table[:, 1 + c] = np.interp(grid, x, y)
        return table


def solve_crf(stack: ExposureStack, smoothness: float = 50.0) -> DiscreteCrf:
    """Least-squares recovery of the discrete response, per channel.

    Solved densely with a QR (orthogonal factorization) routine; the system
    stacks P*J weighted data rows, one gauge row pinning g[128] = 0 and 254
    weighted second-difference smoothness rows.
    """
    if smoothness <= 0:
        raise InputError(f"smoothness weight must be positive, got {smoothness}")
    if stack.n_exposures < 2:
        raise SolveError("recovering a response curve needs at least two exposures")
    p, j = stack.n_sites, stack.n_exposures
    if p < 1:
        raise SolveError("empty exposure stack")
    w = hat_weights()
    n_codes = 256
    out = np.empty((n_codes, 3))
    for c in range(3):
        z_all = stack.codes[:, :, c].astype(np.intp)
        # sites saturated in every exposure carry zero weight everywhere and
        # would leave their irradiance unknowns unconstrained
        usable = w[z_all].sum(axis=1) > 0
        z = z_all[usable]
        p = z.shape[0]
        if p < 1:
            raise SolveError(f"channel {c}: every site is saturated in all exposures")
        n_rows = p * j + 1 + (n_codes - 2)
        n_cols = n_codes + p
        a = np.zeros((n_rows, n_cols))
        b = np.zeros(n_rows)
        wij = w[z]  # [p, j]
        rows = np.arange(p * j)
        a[rows, z.reshape(-1)] = wij.reshape(-1)
        a[rows, n_codes + np.repeat(np.arange(p), j)] = -wij.reshape(-1)
        b[rows] = (wij * stack.log_exposure_times[None, :]).reshape(-1)
        k = p * j
        a[k, Z_MID] = 1.0  # gauge: g[128] = 0
        zi = np.arange(1, n_codes - 1)
        sw = smoothness * w[zi]
        a[k + zi, zi - 1] = sw
        a[k + zi, zi] = -2.0 * sw
        a[k + zi, zi + 1] = sw
        solution, _, rank, _ = scipy.linalg.lstsq(a, b, lapack_driver="gelsy")
        if rank < n_cols:
            covered = np.unique(z).size
            raise SolveError(
                f"response solve is rank deficient (rank {rank} < {n_cols}); "
                f"stack covers {covered}/256 codes in channel {c} - add sites or exposures"
            )
        out[:, c] = solution[:n_codes]
    return DiscreteCrf(log_exposure=out, smoothness=smoothness)


def sample_sites(
    images,
    n_sites: int,
    rng: np.random.Generator,
    n_strata: int = 16,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick (rows, cols) pixel sites covering the code range.

    Sites are stratified by the middle exposure's mean code so the solve sees
    the whole curve; pixels saturated (0 or 255) in every exposure carry no
    information and are excluded.
    """
    stack = np.asarray(images)
    if stack.ndim != 4 or stack.shape[3] != 3:
        raise InputError(f"images must be [exposures, h, w, 3], got {stack.shape}")
    j = stack.shape[0]
    min_sites = int(np.ceil(256.0 / max(j - 1, 1)))
    if n_sites < min_sites:
        raise InputError(f"need at least {min_sites} sites for {j} exposures, got {n_sites}")

    informative = np.any((stack > 0) & (stack < 255), axis=(0, 3))  # [h, w]
    usable_rows, usable_cols = np.nonzero(informative)
    if usable_rows.size == 0:
        raise InputError("every pixel is saturated in all exposures; nothing to calibrate")

    key = stack[j // 2].mean(axis=2)[usable_rows, usable_cols]  # middle exposure mean code
    strata = np.clip((key / 256.0 * n_strata).astype(int), 0, n_strata - 1)
    quota = int(np.ceil(n_sites / n_strata))
    chosen = []
    for s in range(n_strata):
        members = np.nonzero(strata == s)[0]
        if members.size == 0:
            continue
        take = min(quota, members.size)
        chosen.append(rng.choice(members, size=take, replace=False))
    chosen = np.concatenate(chosen)
    if chosen.size < n_sites:
        remaining = np.setdiff1d(np.arange(usable_rows.size), chosen, assume_unique=False)
        if remaining.size:
            extra = rng.choice(remaining, size=min(n_sites - chosen.size, remaining.size), replace=False)
            chosen = np.concatenate([chosen, extra])
    if chosen.size < min_sites:
        raise InputError(f"only {chosen.size} usable sites available, need {min_sites}")
    chosen = chosen[:n_sites]
    return usable_rows[chosen], usable_cols[chosen]


def build_stack(images, exposure_times, rows, cols) -> ExposureStack:
    """Gather site codes from a same-pose image stack into an ExposureStack."""
    stack = np.asarray(images)
    codes = stack[:, rows, cols, :].transpose(1, 0, 2)  # [sites, exposures, 3]
    return ExposureStack(codes=codes, log_exposure_times=np.log(np.asarray(exposure_times, dtype=np.float64)))


# ---------------------------------------------------------------------------
# curve comparison (gauge-aligned)


@dataclass
class CurveDelta:
    rmse: np.ndarray  # [3], in color units
    max_abs: np.ndarray  # [3]
    shift: np.ndarray  # [3], log-exposure shift applied to the reference


@dataclass
class CrfComparison:
    vs_classical: CurveDelta | None
    vs_gt: CurveDelta | None


def _channel_curves(obj) -> list[tuple[np.ndarray, np.ndarray]]:
    """Normalize a curve source to per-channel (log exposure, color) arrays."""
    if isinstance(obj, DiscreteCrf):
        return [obj.channel_curve(c) for c in range(3)]
    if hasattr(obj, "curve"):  # parametric ground truth
        table = obj.curve(np.linspace(-12.0, 12.0, 4097))
        return [(table[:, 0], table[:, 1 + c]) for c in range(3)]
    table = np.asarray(obj, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != 4:
        raise InputError(f"curve table must be [n, 4], got {table.shape}")
    return [(table[:, 0], table[:, 1 + c]) for c in range(3)]


def _log_exposure_at(x: np.ndarray, y: np.ndarray, color: float) -> float:
    """Invert a (noisy) monotone curve at one color value."""
    env = np.maximum.accumulate(y)
    if color < env[0] or color > env[-1]:
        raise InputError(f"curve never reaches color {color}; domains do not overlap")
    return float(np.interp(color, env, x))


def _curve_delta(a_curves, b_curves, color_range=(0.05, 0.95), n_grid: int = 256) -> CurveDelta:
    rmse = np.empty(3)
    max_abs = np.empty(3)
    shifts = np.empty(3)
    lo_c, hi_c = color_range
    for c in range(3):
        xa, ya = a_curves[c]
        xb, yb = b_curves[c]
        shift = _log_exposure_at(xa, ya, 0.5) - _log_exposure_at(xb, yb, 0.5)
        lo = max(_log_exposure_at(xa, ya, lo_c), _log_exposure_at(xb, yb, lo_c) + shift)
        hi = min(_log_exposure_at(xa, ya, hi_c), _log_exposure_at(xb, yb, hi_c) + shift)
        if not lo < hi:
            raise InputError("aligned curves share no color range to compare on")
        grid = np.linspace(lo, hi, n_grid)
        va = np.interp(grid, xa, ya)
        vb = np.interp(grid - shift, xb, yb)
        diff = va - vb
        rmse[c] = float(np.sqrt(np.mean(diff * diff)))
        max_abs[c] = float(np.max(np.abs(diff)))
        shifts[c] = shift
    return CurveDelta(rmse=rmse, max_abs=max_abs, shift=shifts)


def compare_crf(learned, classical=None, gt=None, color_range=(0.05, 0.95)) -> CrfComparison:
    """Deviation of the learned response from the classical solve and/or the
    parametric ground truth, per channel, after gauge alignment.

    Curves are shifted along the log-exposure axis so both pass through color
    0.5 at the same abscissa (the two estimators pin their free scale in
    different ways), then compared in color units on the overlap of the given
    color range.
    """
    learned_curves = _channel_curves(learned)
    vs_classical = (
        _curve_delta(learned_curves, _channel_curves(classical), color_range)
        if classical is not None
        else None
    )
    vs_gt = _curve_delta(learned_curves, _channel_curves(gt), color_range) if gt is not None else None
    return CrfComparison(vs_classical=vs_classical, vs_gt=vs_gt)
