"""Small shared helpers: threading cap, atomic file writes, seeding."""

import os
import tempfile

import numpy as np

from .errors import InputError

THREADS_ENV = "HDRF_THREADS"


def thread_count() -> int:
    """Worker cap: HDRF_THREADS if set, else the machine's core count."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
        if n < 1:
            raise InputError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write a file atomically (temp file in the same directory, then rename).

    Interrupted runs therefore never leave truncated files behind.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent, reproducible generator streams derived from one seed."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(n)]
