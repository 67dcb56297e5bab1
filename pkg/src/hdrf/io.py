"""Dataset and image IO with bit-exact formats.

Dataset directory layout:
    meta.json                  schema below
    train/<name>.png           8-bit RGB training views
    test_ldr/<pose>_<e>.png    held-out LDR views (two exposures per pose)
    test_hdr/<pose>.pfm        linear HDR ground truth per held-out pose

meta.json keys: version, bbox{min,max}, near, far,
intrinsics{fx,fy,cx,cy,width,height}, crf{gamma,gain}|null, c0_gt|null,
views:[{file, split:"train"|"test", c2w: 16 row-major floats,
exposure_time_s}]. The HDR ground truth of an LDR test view
`test_ldr/<pose>_<e>.png` lives at `test_hdr/<pose>.pfm`.

PFM files use the "PF" header, ASCII width/height, a scale line of "-1.0"
(little-endian; positive scales are rejected), then float32 rows written
bottom-to-top. LDR images are normalized to [0, 1] in memory (multiples of
1/255); HDR images stay in linear radiance.
"""

import io as _io
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import FormatError, InputError
from .render import CameraView
from .util import atomic_write_bytes

META_VERSION = 1


# ---------------------------------------------------------------------------
# PNG (8-bit LDR)


def write_png(path: str, image: np.ndarray) -> None:
    """Write an [h, w, 3] float image in [0, 1] (or uint8) as 8-bit RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected [h, w, 3] image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path: str) -> np.ndarray:
    """Read an 8-bit RGB PNG into an [h, w, 3] float64 image in [0, 1]."""
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
        arr = np.asarray(img, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# PFM (float32 HDR)


def write_pfm(path: str, image: np.ndarray) -> None:
    """Write an [h, w, 3] float image as a little-endian color PFM."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"expected [h, w, 3] image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.flipud(arr).astype("<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def _read_token(fh) -> bytes:
    # whitespace-delimited header token
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise FormatError("unexpected end of PFM header")
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pfm(path: str) -> np.ndarray:
    """Read a little-endian color PFM into an [h, w, 3] float64 image."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic != b"PF":
            raise FormatError(f"{path}: unsupported PFM identifier {magic!r} (only 'PF' color maps)")
        try:
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            scale = float(_read_token(fh))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        if scale >= 0:
            raise FormatError(f"{path}: big-endian PFM (scale {scale}) is not supported")
        payload = fh.read(w * h * 3 * 4)
    if len(payload) != w * h * 3 * 4:
        raise FormatError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, 3)
    return np.flipud(arr).astype(np.float64)


def write_image(path: str, image: np.ndarray) -> None:
    """Dispatch on extension: .png for LDR, .pfm for HDR floats."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        write_png(path, image)
    elif ext == ".pfm":
        write_pfm(path, image)
    else:
        raise InputError(f"unsupported image extension {ext!r} (use .png or .pfm)")


def read_image(path: str) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        return read_png(path)
    if ext == ".pfm":
        return read_pfm(path)
    raise InputError(f"unsupported image extension {ext!r} (use .png or .pfm)")


# ---------------------------------------------------------------------------
# dataset bundle


@dataclass
class DatasetView:
    file: str
    split: str
    camera: CameraView

    @property
    def pose_tag(self) -> str:
        """Filename stem up to the first underscore; keys the HDR ground truth."""
        stem = os.path.splitext(os.path.basename(self.file))[0]
        return stem.split("_")[0]


@dataclass
class DatasetBundle:
    root: str
    views: list[DatasetView]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    near: float
    far: float
    crf: dict | None
    c0_gt: float | None
    meta: dict

    def __post_init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def train_views(self) -> list[DatasetView]:
        return [v for v in self.views if v.split == "train"]

    def test_views(self) -> list[DatasetView]:
        return [v for v in self.views if v.split == "test"]

    def train_exposures(self) -> set[float]:
        return {v.camera.exposure_time_s for v in self.train_views()}

    def load_image(self, view: DatasetView) -> np.ndarray:
        path = os.path.join(self.root, view.file)
        if path not in self._cache:
            self._cache[path] = read_image(path)
        return self._cache[path]

    def hdr_path(self, view: DatasetView) -> str:
        return os.path.join(self.root, "test_hdr", view.pose_tag + ".pfm")

    def hdr_ground_truth(self, view: DatasetView) -> np.ndarray | None:
        path = self.hdr_path(view)
        if not os.path.exists(path):
            return None
        if path not in self._cache:
            self._cache[path] = read_pfm(path)
        return self._cache[path]


def save_meta(out_dir: str, meta: dict) -> None:
    atomic_write_bytes(os.path.join(out_dir, "meta.json"), json.dumps(meta, indent=1).encode())


def _need(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise InputError(f"meta.json: missing key {key!r} in {where}")
    return mapping[key]


def load_dataset(root: str) -> DatasetBundle:
    """Load and fully validate a dataset directory; fails fast with the
    offending entry named in the error."""
    meta_path = os.path.join(root, "meta.json")
    if not os.path.exists(meta_path):
        raise InputError(f"no meta.json under {root}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{meta_path}: invalid JSON ({exc})") from exc

    version = _need(meta, "version", "top level")
    if int(version) != META_VERSION:
        raise InputError(f"{meta_path}: unsupported schema version {version} (expected {META_VERSION})")
    bbox = _need(meta, "bbox", "top level")
    bbox_min = np.asarray(_need(bbox, "min", "bbox"), dtype=np.float64)
    bbox_max = np.asarray(_need(bbox, "max", "bbox"), dtype=np.float64)
    if bbox_min.shape != (3,) or bbox_max.shape != (3,) or np.any(bbox_max <= bbox_min):
        raise InputError(f"{meta_path}: bbox must be two 3-vectors with max > min")
    near = float(_need(meta, "near", "top level"))
    far = float(_need(meta, "far", "top level"))
    if not 0 < near < far:
        raise InputError(f"{meta_path}: need 0 < near < far, got {near}, {far}")
    intr = _need(meta, "intrinsics", "top level")
    for key in ("fx", "fy", "cx", "cy", "width", "height"):
        _need(intr, key, "intrinsics")
    crf = _need(meta, "crf", "top level")
    if crf is not None:
        for key in ("gamma", "gain"):
            _need(crf, key, "crf")
    c0_gt = _need(meta, "c0_gt", "top level")

    views = []
    n_train = 0
    for i, entry in enumerate(_need(meta, "views", "top level")):
        where = f"views[{i}]"
        file = _need(entry, "file", where)
        split = _need(entry, "split", where)
        if split not in ("train", "test"):
            raise InputError(f"{meta_path}: {where} ({file}): bad split {split!r}")
        c2w = np.asarray(_need(entry, "c2w", where), dtype=np.float64)
        if c2w.shape != (16,):
            raise InputError(f"{meta_path}: {where} ({file}): c2w must be 16 row-major floats")
        dt = float(_need(entry, "exposure_time_s", where))
        if not dt > 0:
            raise InputError(f"{meta_path}: {where} ({file}): exposure_time_s must be > 0, got {dt}")
        path = os.path.join(root, file)
        if not os.path.exists(path):
            raise InputError(f"{meta_path}: {where}: missing image file {path}")
        with Image.open(path) as img:
            size = img.size
        if size != (int(intr["width"]), int(intr["height"])):
            raise InputError(
                f"{meta_path}: {where} ({file}): image is {size[0]}x{size[1]}, "
                f"intrinsics declare {intr['width']}x{intr['height']}"
            )
        try:
            camera = CameraView.from_c2w(
                c2w.reshape(4, 4), intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                int(intr["width"]), int(intr["height"]), dt,
            )
        except InputError as exc:
            raise InputError(f"{meta_path}: {where} ({file}): {exc}") from exc
        views.append(DatasetView(file=file, split=split, camera=camera))
        n_train += split == "train"
    if n_train == 0:
        raise InputError(f"{meta_path}: dataset has no training views")

    return DatasetBundle(
        root=root,
        views=views,
        bbox_min=bbox_min,
        bbox_max=bbox_max,
        near=near,
        far=far,
        crf=crf,
        c0_gt=c0_gt,
        meta=meta,
    )
