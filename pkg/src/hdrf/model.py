"""The two implicit functions and their serialization.

A radiance field MLP maps an encoded sample position (plus encoded view
direction) to per-channel log-radiance and a non-negative density. A tone
mapper of three independent per-channel MLPs maps log-exposure (log-radiance
plus log exposure time) to an LDR color in (0, 1). Two field copies (coarse
and fine) share one tone mapper: a single camera has a single response curve.

The field outputs log-radiance rather than radiance so positivity is
structural and the tone mapper can consume it directly; radiance is
exp(log-radiance) where linear values are needed. Density uses softplus
instead of relu to avoid dead-gradient stalls in small models.

Checkpoint format (single binary file, written atomically):
    magic "HDRF" | uint32 version | uint64 json length | config JSON (utf-8)
    | uint64 array count | per array: uint64 element count + float64 LE data.
Array order: coarse field, fine field, tone mapper. Within a field: trunk
(w, b) per layer, density head (w, b), radiance hidden (w_features, w_dirs,
b), radiance output (w, b). Within the tone mapper: per channel (w1, b1,
w2, b2), channels in RGB order. Shapes are reconstructed from the config.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .encoding import EncodingConfig, positional_encode
from .errors import FormatError, InputError, NumericError, ShapeError
from .util import atomic_write_bytes

CHECKPOINT_MAGIC = b"HDRF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes; defaults are the desk-scale configuration."""

    trunk_depth: int = 4
    trunk_width: int = 64
    radiance_hidden: int = 32
    mapper_hidden: int = 32
    levels_position: int = 10
    levels_direction: int = 4
    include_input: bool = True

    def __post_init__(self):
        if min(self.trunk_depth, self.trunk_width, self.radiance_hidden, self.mapper_hidden) < 1:
            raise InputError("model sizes must be >= 1")

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.levels_position, self.levels_direction, self.include_input)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """The large configuration (8x256 trunk, 128-wide heads and mapper)."""
        return cls(trunk_depth=8, trunk_width=256, radiance_hidden=128, mapper_hidden=128)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


class FieldParams:
    """Weights of one radiance-field MLP."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        enc = config.encoding
        p_dim = enc.position_dim()
        d_dim = enc.direction_dim()
        w = config.trunk_width
        self.trunk: list[tuple[Tensor, Tensor]] = []
        fan_in = p_dim
        for _ in range(config.trunk_depth):
            self.trunk.append((_glorot(rng, fan_in, w), _zeros(w)))
            fan_in = w
        self.sigma_w = _glorot(rng, w, 1)
        # start with thin fog: heavy initial density has to be cleared from
        # all the empty space before anything sharp can form
        self.sigma_b = Tensor(np.array([-1.0]), requires_grad=True)
        h = config.radiance_hidden
        self.rad_w1 = _glorot(rng, w, h)
        self.rad_w2 = _glorot(rng, d_dim, h)
        self.rad_b = _zeros(h)
        self.out_w = _glorot(rng, h, 3)
        self.out_b = _zeros(3)

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in self.trunk:
            out.extend((w, b))
        out.extend((self.sigma_w, self.sigma_b, self.rad_w1, self.rad_w2, self.rad_b, self.out_w, self.out_b))
        return out


class ToneMapperParams:
    """Three independent single-hidden-layer scalar MLPs, one per channel.

    Initialized as a gently increasing curve: positive first/second layer
    weights with relu kinks spread over the working log-exposure range, and
    the output bias chosen so the curve starts at 0.5 for log-exposure zero.
    A symmetric random start lets individual channels collapse onto a flat
    curve (predicting the mean color), after which no gradient reaches the
    radiance for that channel; an increasing start avoids that failure mode
    without constraining what training can reach.
    """

    KINK_RANGE = (-6.0, 3.0)

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        h = config.mapper_hidden
        self.channels: list[tuple[Tensor, Tensor, Tensor, Tensor]] = []
        for _ in range(3):
            w1 = rng.uniform(0.3, 1.0, (1, h))
            kinks = rng.uniform(*self.KINK_RANGE, h)
            b1 = -w1[0] * kinks
            w2 = rng.uniform(0.5, 1.5, (h, 1)) * (2.0 / h)
            pre_at_zero = float((np.maximum(b1, 0.0) @ w2)[0])
            b2 = np.array([-pre_at_zero])  # sigmoid input 0 at log-exposure 0
            self.channels.append(
                (Tensor(w1, True), Tensor(b1, True), Tensor(w2, True), Tensor(b2, True))
            )

    def tensors(self) -> list[Tensor]:
        out = []
        for w1, b1, w2, b2 in self.channels:
            out.extend((w1, b1, w2, b2))
        return out


@dataclass
class ModelBundle:
    """Everything needed to evaluate the model: two fields, shared mapper,
    encoding configuration and the scene box used to normalize positions."""

    coarse: FieldParams
    fine: FieldParams
    tone_mapper: ToneMapperParams
    config: ModelConfig
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def parameters(self) -> list[Tensor]:
        return self.coarse.tensors() + self.fine.tensors() + self.tone_mapper.tensors()

    def field(self, which: str) -> FieldParams:
        if which == "coarse":
            return self.coarse
        if which == "fine":
            return self.fine
        raise InputError(f"which must be 'coarse' or 'fine', got {which!r}")

    def normalize_positions(self, positions: np.ndarray) -> np.ndarray:
        span = self.bbox_max - self.bbox_min
        return 2.0 * (positions - self.bbox_min) / span - 1.0


def create_bundle(
    config: ModelConfig,
    bbox_min,
    bbox_max,
    seed: int = 0,
) -> ModelBundle:
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    if bbox_min.shape != (3,) or bbox_max.shape != (3,) or np.any(bbox_max <= bbox_min):
        raise InputError("bounding box must be two 3-vectors with max > min")
    rng = np.random.default_rng(seed)
    return ModelBundle(
        coarse=FieldParams(config, rng),
        fine=FieldParams(config, rng),
        tone_mapper=ToneMapperParams(config, rng),
        config=config,
        bbox_min=bbox_min,
        bbox_max=bbox_max,
    )


# ---------------------------------------------------------------------------
# dense layers as taped ops (kernel-backed)


def dense(x: Tensor, w: Tensor, b: Tensor, act: int) -> Tensor:
    y = kernels.dense_forward(x.data, w.data, b.data, act)
    out = Tensor(y, x.requires_grad or w.requires_grad or b.requires_grad, _validate=False)

    def backward(g):
        dx, dw, db = kernels.dense_backward(x.data, w.data, y, g, act, need_dx=x.requires_grad)
        return (dx, dw if w.requires_grad else None, db if b.requires_grad else None)

    return ad.record(out, (x, w, b), backward)


def dense_pair(x1: Tensor, x2_const: np.ndarray, w1: Tensor, w2: Tensor, b: Tensor, act: int) -> Tensor:
    """Dense layer over the concatenation [x1, x2] where x2 carries no gradient."""
    y = kernels.dense2_forward(x1.data, x2_const, w1.data, w2.data, b.data, act)
    out = Tensor(y, x1.requires_grad or w1.requires_grad, _validate=False)

    def backward(g):
        dx1, dw1, dw2, db = kernels.dense2_backward(x1.data, x2_const, w1.data, w2.data, y, g, act)
        return (dx1 if x1.requires_grad else None, dw1, dw2, db)

    return ad.record(out, (x1, w1, w2, b), backward)


# ---------------------------------------------------------------------------
# model evaluation


def field_forward(field: FieldParams, pos_encoded: np.ndarray, dir_encoded: np.ndarray):
    """Batched field evaluation on pre-encoded inputs.

    pos_encoded: [m, position_dim]; dir_encoded: [m, direction_dim].
    Returns (log_radiance Tensor [m, 3], sigma Tensor [m, 1], sigma >= 0).
    """
    h = Tensor(pos_encoded, _validate=False)
    for w, b in field.trunk:
        h = dense(h, w, b, kernels.ACT_RELU)
    sigma = dense(h, field.sigma_w, field.sigma_b, kernels.ACT_SOFTPLUS)
    hr = dense_pair(h, dir_encoded, field.rad_w1, field.rad_w2, field.rad_b, kernels.ACT_RELU)
    ln_e = dense(hr, field.out_w, field.out_b, kernels.ACT_LINEAR)
    return ln_e, sigma


def field_eval(bundle: ModelBundle, position, direction, which: str = "fine"):
    """Evaluate one sample point. Returns (log_radiance [3], sigma float).

    The position is normalized by the bundle's bounding box before encoding;
    the direction must be a unit vector (within 1e-6).
    """
    position = np.asarray(position, dtype=np.float64).reshape(3)
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(position)) and np.all(np.isfinite(direction))):
        raise NumericError("non-finite sample position or direction")
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-6:
        raise InputError(f"direction must be unit length, |d| = {norm:.8f}")
    enc = bundle.config.encoding
    p = positional_encode(bundle.normalize_positions(position[None, :]), enc.levels_position, enc.include_input)
    d = positional_encode(direction[None, :], enc.levels_direction, enc.include_input)
    ln_e, sigma = field_forward(bundle.field(which), p, d)
    return ln_e.data[0].copy(), float(sigma.data[0, 0])


def tone_map(tm: ToneMapperParams, ln_e, ln_dt):
    """Map log-radiance plus log exposure time to LDR color, per channel.

    ln_e: Tensor or array [m, 3] (or a single 3-vector); ln_dt: scalar or
    array [m] / [m, 1] of log exposure times. Channel c sees only the sum
    ln_e[:, c] + ln_dt, so adding k to ln_e and subtracting k from ln_dt is
    an exact no-op. Returns colors in (0, 1) as a Tensor [m, 3] (or [3]).
    """
    single = not isinstance(ln_e, Tensor) and np.asarray(ln_e).ndim == 1
    x = ln_e if isinstance(ln_e, Tensor) else Tensor(np.atleast_2d(np.asarray(ln_e, dtype=np.float64)))
    if x.data.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"ln_e must be [m, 3], got {x.shape}")
    m = x.shape[0]
    dt = np.asarray(ln_dt, dtype=np.float64).reshape(-1, 1)
    if dt.shape[0] == 1 and m != 1:
        dt = np.broadcast_to(dt, (m, 1))
    if dt.shape != (m, 1):
        raise ShapeError(f"ln_dt must broadcast to [{m}, 1], got {np.shape(ln_dt)}")
    dt_t = Tensor(dt)  # validates finiteness of the exposure input
    cols = []
    for c, (w1, b1, w2, b2) in enumerate(tm.channels):
        xc = ad.add(ad.take_column(x, c), dt_t)
        h = dense(xc, w1, b1, kernels.ACT_RELU)
        cols.append(dense(h, w2, b2, kernels.ACT_SIGMOID))
    out = ad.concat(cols, axis=1)
    if single:
        return out.data[0].copy()
    return out


def mapper_curve(tm: ToneMapperParams, grid) -> np.ndarray:
    """Evaluate each channel of the tone mapper on a log-exposure grid.

    Returns a [n, 4] table with columns (log_exposure, red, green, blue),
    the shared discrete-curve format used for export and comparison.
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise InputError("curve export needs a non-empty grid")
    if not np.all(np.isfinite(grid)):
        raise NumericError("non-finite grid values")
    if np.any(np.diff(grid) < 0):
        raise InputError("grid must be sorted ascending")
    x = grid[:, None]
    table = np.empty((grid.size, 4))
    table[:, 0] = grid
    for c, (w1, b1, w2, b2) in enumerate(tm.channels):
        h = kernels.dense_forward(x, w1.data, b1.data, kernels.ACT_RELU)
        y = kernels.dense_forward(h, w2.data, b2.data, kernels.ACT_SIGMOID)
        table[:, 1 + c] = y[:, 0]
    return table


def crf_curve_export(tm: ToneMapperParams, grid) -> np.ndarray:
    """Alias of mapper_curve; the exported discrete response curve."""
    return mapper_curve(tm, grid)


# ---------------------------------------------------------------------------
# checkpointing


def _param_arrays(bundle: ModelBundle) -> list[np.ndarray]:
    return [t.data for t in bundle.parameters()]


def save_checkpoint(path: str, bundle: ModelBundle, extra: dict | None = None) -> None:
    """Serialize a bundle (plus caller metadata) to the binary container."""
    config = {
        "model": asdict(bundle.config),
        "bbox_min": bundle.bbox_min.tolist(),
        "bbox_max": bundle.bbox_max.tolist(),
        "extra": extra or {},
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    arrays = _param_arrays(bundle)
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<Q", len(arrays)))
    for arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<Q", data.size))
        parts.append(data.tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path: str) -> tuple[ModelBundle, dict]:
    """Read a checkpoint; returns (bundle, extra metadata dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (json_len,) = struct.unpack_from("<Q", raw, 8)
        pos = 16
        config = json.loads(raw[pos : pos + json_len].decode("utf-8"))
        pos += json_len
        (n_arrays,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        model_cfg = ModelConfig(**config["model"])
        bundle = create_bundle(model_cfg, config["bbox_min"], config["bbox_max"], seed=0)
        targets = bundle.parameters()
        if n_arrays != len(targets):
            raise FormatError(f"{path}: expected {len(targets)} arrays, found {n_arrays}")
        for t in targets:
            (count,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if count != t.data.size:
                raise FormatError(f"{path}: array size mismatch ({count} vs {t.data.size})")
            if pos + count * 8 > len(raw):
                raise FormatError(f"{path}: truncated parameter data")
            values = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
            pos += count * 8
            t.data[...] = values.reshape(t.data.shape)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return bundle, config.get("extra", {})
