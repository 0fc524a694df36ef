"""Per-step feature trajectories: capture, synthesis, binary round-trip.

A trajectory holds the ground-truth output of the cacheable block at every
denoising step, flattened per step for downstream fitting. Step index t runs
in denoising order: t = 0 is the first sampler invocation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "TrajectoryFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedFileError",
    "FeatureTrajectory",
    "SynthSpec",
    "synthesize",
    "capture",
    "save",
    "load",
]

MAGIC = b"CQTRAJ01"
FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4")}


class TrajectoryFormatError(ValueError):
    """Base class for malformed trajectory files."""


class BadMagicError(TrajectoryFormatError):
    pass


class VersionMismatchError(TrajectoryFormatError):
    pass


class TruncatedFileError(TrajectoryFormatError):
    pass


@dataclass(frozen=True)
class FeatureTrajectory:
    """Ground-truth cache-point features for every step of one sampler run.

    ``data`` has shape (T, *step_shape) and dtype float32; ``provenance``
    records whether the features came from a model run or a synthetic spec
    (it lives only in memory, the file format stores the array alone).
    """

    data: np.ndarray
    provenance: str = "captured"

    def __post_init__(self):
        if self.data.ndim < 2:
            raise ValueError(
                f"trajectory data needs a step axis plus at least one "
                f"feature axis, got shape {self.data.shape}"
            )
        if self.data.dtype != np.float32:
            raise ValueError(f"trajectory data must be float32, got {self.data.dtype}")
        if self.data.shape[0] < 1:
            raise ValueError("trajectory must contain at least one step")
        if self.provenance not in ("captured", "synthetic"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def steps(self) -> int:
        return self.data.shape[0]

    @property
    def step_shape(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    def step_matrix(self, t: int) -> np.ndarray:
        """Step t features flattened to a (rows, channels) float64 matrix."""
        block = self.data[t].astype(np.float64)
        return block.reshape(-1, block.shape[-1])


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic trajectory with controlled drift structure.

    Either ``values`` tabulates one scalar per step directly, or the mean
    follows a piecewise-linear path: within segment i (starting at
    ``breakpoints[i]``) the mean moves by ``drift_rates[i]`` per step.
    Seeded Gaussian noise of amplitude ``noise`` is added on top.
    """

    steps: int
    channels: int = 1
    rows: int = 1
    breakpoints: tuple[int, ...] = (0,)
    drift_rates: tuple[float, ...] = (0.0,)
    noise: float = 0.0
    seed: int = 0
    base: float = 0.0
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.steps < 1 or self.channels < 1 or self.rows < 1:
            raise ValueError("steps, channels and rows must all be >= 1")
        if self.noise < 0.0:
            raise ValueError("noise amplitude must be non-negative")
        if self.values is not None:
            if len(self.values) != self.steps:
                raise ValueError(
                    f"expected {self.steps} tabulated values, got {len(self.values)}"
                )
            return
        if len(self.breakpoints) != len(self.drift_rates):
            raise ValueError("one drift rate per segment is required")
        bp = self.breakpoints
        if bp[0] != 0 or any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])) or bp[-1] >= self.steps:
            raise ValueError(
                f"breakpoints must start at 0 and increase strictly within "
                f"[0, {self.steps}), got {bp}"
            )


def synthesize(spec: SynthSpec) -> FeatureTrajectory:
    """Materialize a SynthSpec; identical specs produce identical bytes."""
    shape = (spec.steps, spec.rows, spec.channels)
    if spec.values is not None:
        data = np.broadcast_to(
            np.asarray(spec.values, dtype=np.float64)[:, None, None], shape
        ).copy()
    else:
        rates = np.zeros(spec.steps)
        for start, rate in zip(spec.breakpoints, spec.drift_rates):
            rates[start:] = rate
        means = spec.base + np.concatenate([[0.0], np.cumsum(rates[1:])])
        data = np.broadcast_to(means[:, None, None], shape).copy()
        if spec.noise > 0.0:
            # Philox: counter-based, so the stream is fixed by the seed alone.
            gen = np.random.Generator(np.random.Philox(spec.seed))
            data += spec.noise * gen.standard_normal(shape)
    return FeatureTrajectory(data=data.astype(np.float32), provenance="synthetic")


def capture(model, sampler_config, calib_seeds) -> FeatureTrajectory:
    """Record the cacheable block's output at every step of a reference run.

    One full-precision, cache-free run per seed; rows from all seeds are
    stacked per step so downstream fits see every calibration sample.
    """
    from . import pipeline  # deferred: pipeline imports this module's types

    per_seed = [
        pipeline.record_cache_features(model, sampler_config, seed)
        for seed in calib_seeds
    ]
    if not per_seed:
        raise ValueError("capture needs at least one calibration seed")
    stacked = [
        np.concatenate([run[t] for run in per_seed], axis=0)
        for t in range(len(per_seed[0]))
    ]
    data = np.stack(stacked, axis=0).astype(np.float32)
    return FeatureTrajectory(data=data, provenance="captured")


def save(traj: FeatureTrajectory, path) -> None:
    """Write the binary trajectory format (little-endian throughout)."""
    dims = traj.step_shape
    header = MAGIC + struct.pack(
        f"<III{len(dims)}II", FORMAT_VERSION, traj.steps, len(dims), *dims, 0
    )
    payload = np.ascontiguousarray(traj.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def _read_exact(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(buf):
        raise TruncatedFileError(
            f"truncated while reading {what}: need {offset + count} bytes, "
            f"file has {len(buf)}"
        )
    return buf[offset:offset + count], offset + count


def load(path) -> FeatureTrajectory:
    """Read a trajectory file, rejecting malformed input explicitly."""
    buf = Path(path).read_bytes()
    raw, off = _read_exact(buf, 0, len(MAGIC), "magic")
    if raw != MAGIC:
        raise BadMagicError(f"bad magic {raw!r}, expected {MAGIC!r}")
    raw, off = _read_exact(buf, off, 12, "header")
    version, steps, ndim = struct.unpack("<III", raw)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}"
        )
    raw, off = _read_exact(buf, off, 4 * ndim + 4, "dimension list")
    *dims, dtype_code = struct.unpack(f"<{ndim}II", raw)
    if dtype_code not in _DTYPE_CODES:
        raise TrajectoryFormatError(f"unknown dtype code {dtype_code}")
    dtype = _DTYPE_CODES[dtype_code]
    expected = steps * int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload, off = _read_exact(buf, off, expected, "payload")
    if off != len(buf):
        raise TrajectoryFormatError(
            f"{len(buf) - off} trailing bytes after payload"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(steps, *dims)
    return FeatureTrajectory(data=np.ascontiguousarray(data), provenance="captured")
