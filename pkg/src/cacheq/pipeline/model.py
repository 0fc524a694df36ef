"""The toy iterative denoiser everything is verified against.

A three-part MLP predicts the noise added to 2-d points: a shallow stem
mixes the point with a timestep embedding, a deeper trunk produces the
cacheable feature, and a head consumes the stem output concatenated with
that feature. The trunk is the expensive part, so skipping it on cached
steps saves most of the arithmetic; the head's first linear layer (the one
fed the possibly-stale feature) is where quantization error correction is
fitted and applied.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ModelArch",
    "DatasetSpec",
    "ToyDenoiser",
    "SITE_LAYER",
    "QUANTIZABLE_LAYERS",
    "sample_dataset",
    "save_model",
    "load_model",
]

MODEL_MAGIC = b"CQMODEL1"
MODEL_VERSION = 1

# Linear layers by name; "f3a" feeds on the cached feature and is the
# correction site. It deliberately has no bias so its output is a pure
# matrix product of its input.
QUANTIZABLE_LAYERS = ("f1", "f2a", "f2b", "f3a", "f3b")
SITE_LAYER = "f3a"


@dataclass(frozen=True)
class ModelArch:
    """Layer widths and the diffusion discretization."""

    data_dim: int = 2
    temb_dim: int = 4
    stem_width: int = 32
    trunk_width: int = 64
    feature_dim: int = 32
    head_width: int = 48
    steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.12

    def __post_init__(self):
        if min(self.data_dim, self.stem_width, self.trunk_width,
               self.feature_dim, self.head_width) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.temb_dim != 4:
            # The timestep embedding is a fixed 4-feature map, not learned.
            raise ValueError("temb_dim is fixed at 4")
        if self.steps < 2:
            raise ValueError("need at least two diffusion steps")
        if not 0.0 < self.beta_min < self.beta_max < 1.0:
            raise ValueError(
                f"beta range ({self.beta_min}, {self.beta_max}) must be "
                f"increasing inside (0, 1)"
            )

    @property
    def site_in_dim(self) -> int:
        return self.stem_width + self.feature_dim

    @property
    def site_out_dim(self) -> int:
        return self.head_width

    def layer_shapes(self) -> dict[str, tuple[tuple[int, int], bool]]:
        """(weight shape, has bias) per linear layer."""
        return {
            "f1": ((self.data_dim + self.temb_dim, self.stem_width), True),
            "f2a": ((self.stem_width, self.trunk_width), True),
            "f2b": ((self.trunk_width, self.feature_dim), True),
            "f3a": ((self.site_in_dim, self.head_width), False),
            "f3b": ((self.head_width, self.data_dim), True),
        }


@dataclass(frozen=True)
class DatasetSpec:
    """2-d toy data distribution the denoiser is trained on."""

    kind: str = "gaussian_ring"
    modes: int = 8
    radius: float = 1.5
    sigma: float = 0.12
    arc_noise: float = 0.06

    def __post_init__(self):
        if self.kind not in ("gaussian_ring", "two_arcs"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "gaussian_ring" and self.modes < 1:
            raise ValueError("gaussian_ring needs at least one mode")


def sample_dataset(spec: DatasetSpec, count: int, gen: np.random.Generator) -> np.ndarray:
    """Draw ``count`` points from the toy distribution."""
    if spec.kind == "gaussian_ring":
        which = gen.integers(0, spec.modes, size=count)
        angles = 2.0 * np.pi * which / spec.modes
        centers = spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return centers + spec.sigma * gen.standard_normal((count, 2))
    # two interleaved half circles, shifted/scaled to roughly unit spread
    t = np.pi * gen.random(count)
    upper = gen.random(count) < 0.5
    x = np.where(upper, np.cos(t), 1.0 - np.cos(t))
    y = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x - 0.5, y - 0.25], axis=1) * 1.4
    return pts + spec.arc_noise * gen.standard_normal((count, 2))


class ToyDenoiser:
    """Noise predictor eps_hat(x_t, t) with an explicitly cacheable trunk."""

    def __init__(self, arch: ModelArch, params: dict[str, np.ndarray],
                 lineage: dict | None = None):
        self.arch = arch
        self.params = params
        self.lineage = lineage or {}
        self._validate()
        betas = np.linspace(arch.beta_min, arch.beta_max, arch.steps)
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)

    def _validate(self):
        expected = self.arch.layer_shapes()
        for name, (w_shape, has_bias) in expected.items():
            w = self.params.get(f"{name}.w")
            if w is None or w.shape != w_shape:
                raise ValueError(
                    f"layer {name} weights must have shape {w_shape}, got "
                    f"{None if w is None else w.shape}"
                )
            if not np.isfinite(w).all():
                raise ValueError(f"layer {name} has non-finite weights")
            b = self.params.get(f"{name}.b")
            if has_bias:
                if b is None or b.shape != (w_shape[1],) or not np.isfinite(b).all():
                    raise ValueError(f"layer {name} bias is missing or malformed")
            elif b is not None:
                raise ValueError(f"layer {name} must not carry a bias")

    @classmethod
    def initialize(cls, arch: ModelArch, seed: int) -> "ToyDenoiser":
        """Fresh weights; identical seed and arch give bit-identical values."""
        gen = np.random.Generator(np.random.Philox(seed))
        params: dict[str, np.ndarray] = {}
        for name, (w_shape, has_bias) in arch.layer_shapes().items():
            fan_in = w_shape[0]
            params[f"{name}.w"] = gen.standard_normal(w_shape) / np.sqrt(fan_in)
            if has_bias:
                params[f"{name}.b"] = np.zeros(w_shape[1])
        return cls(arch, params, lineage={"init_seed": seed})

    @property
    def steps(self) -> int:
        return self.arch.steps

    # -- forward pieces -----------------------------------------------------

    def embed_array(self, diff_indices: np.ndarray) -> np.ndarray:
        """Fixed (non-learned) timestep features, one row per index."""
        frac = np.asarray(diff_indices, dtype=np.float64) / self.arch.steps
        return np.stack([
            frac,
            np.sin(2.0 * np.pi * frac),
            np.cos(2.0 * np.pi * frac),
            np.sin(4.0 * np.pi * frac),
        ], axis=1)

    def embed(self, diff_index: int, batch: int) -> np.ndarray:
        """Timestep features for one index, broadcast over the batch."""
        row = self.embed_array(np.array([diff_index]))[0]
        return np.broadcast_to(row, (batch, row.size)).copy()

    def stem(self, x: np.ndarray, temb: np.ndarray) -> np.ndarray:
        u = np.concatenate([x, temb], axis=1)
        return np.tanh(u @ self.params["f1.w"] + self.params["f1.b"])

    def trunk(self, h: np.ndarray) -> np.ndarray:
        v = np.tanh(h @ self.params["f2a.w"] + self.params["f2a.b"])
        return np.tanh(v @ self.params["f2b.w"] + self.params["f2b.b"])

    def head_from_site(self, site_out: np.ndarray) -> np.ndarray:
        y = np.tanh(site_out)
        return y @ self.params["f3b.w"] + self.params["f3b.b"]

    def site_input(self, h: np.ndarray, feature: np.ndarray) -> np.ndarray:
        return np.concatenate([h, feature], axis=1)

    def site_forward(self, z: np.ndarray) -> np.ndarray:
        return z @ self.params["f3a.w"]

    def forward(self, x: np.ndarray, diff_index: int) -> np.ndarray:
        """Full-precision, cache-free noise prediction."""
        h = self.stem(x, self.embed(diff_index, x.shape[0]))
        g = self.trunk(h)
        return self.head_from_site(self.site_forward(self.site_input(h, g)))

    # -- accounting ----------------------------------------------------------

    def mac_counts(self) -> dict[str, int]:
        """Per-sample multiply-accumulates of each linear layer."""
        return {
            name: shape[0] * shape[1]
            for name, (shape, _) in self.arch.layer_shapes().items()
        }

    def trunk_macs(self) -> int:
        counts = self.mac_counts()
        return counts["f2a"] + counts["f2b"]

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())


def save_model(model: ToyDenoiser, path, config_hash: str = "") -> None:
    """Binary model file: magic, JSON header, float32 weight payload.

    Weights are stored in the header's layer order. float32 storage is part
    of the format, so save -> load loses float64 training precision once but
    round-trips bit-exactly afterwards.
    """
    names = sorted(model.params)
    header = {
        "version": MODEL_VERSION,
        "arch": asdict(model.arch),
        "lineage": model.lineage,
        "config_hash": config_hash,
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(model.params[n], dtype="<f4").tobytes() for n in names
    )
    Path(path).write_bytes(
        MODEL_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload
    )


def load_model(path) -> ToyDenoiser:
    buf = Path(path).read_bytes()
    if buf[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError(f"not a model file: bad magic {buf[:8]!r}")
    (header_len,) = struct.unpack_from("<I", buf, len(MODEL_MAGIC))
    start = len(MODEL_MAGIC) + 4
    header = json.loads(buf[start:start + header_len].decode("utf-8"))
    if header["version"] != MODEL_VERSION:
        raise ValueError(f"unsupported model version {header['version']}")
    arch = ModelArch(**header["arch"])
    offset = start + header_len
    params: dict[str, np.ndarray] = {}
    for tensor in header["tensors"]:
        shape = tuple(tensor["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        raw = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
        params[tensor["name"]] = raw.reshape(shape).astype(np.float64)
        offset += count * 4
    if offset != len(buf):
        raise ValueError(f"{len(buf) - offset} trailing bytes in model file")
    return ToyDenoiser(arch, params, lineage=header.get("lineage", {}))
