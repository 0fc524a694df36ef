"""Denoising-objective training for the toy model.

Plain numpy with hand-written gradients: the net is five linear layers and
tanh, so backprop is a page of code, and keeping every operation in one
process makes training bit-reproducible for a fixed seed. The objective is
the usual one: corrupt a clean point to step i, predict the injected noise,
minimize the mean squared error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import DatasetSpec, ModelArch, ToyDenoiser, sample_dataset

__all__ = ["TrainConfig", "train_toy"]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 128
    learning_rate: float = 2e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")


def _forward_cache(model: ToyDenoiser, x: np.ndarray, temb: np.ndarray):
    p = model.params
    u = np.concatenate([x, temb], axis=1)
    h = np.tanh(u @ p["f1.w"] + p["f1.b"])
    v = np.tanh(h @ p["f2a.w"] + p["f2a.b"])
    g = np.tanh(v @ p["f2b.w"] + p["f2b.b"])
    z = np.concatenate([h, g], axis=1)
    y = np.tanh(z @ p["f3a.w"])
    eps_hat = y @ p["f3b.w"] + p["f3b.b"]
    return u, h, v, g, z, y, eps_hat


def _gradients(model: ToyDenoiser, cache, eps: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    u, h, v, g, z, y, eps_hat = cache
    stem_width = model.arch.stem_width
    n_elems = eps.size

    d_out = 2.0 * (eps_hat - eps) / n_elems
    grads = {
        "f3b.w": y.T @ d_out,
        "f3b.b": d_out.sum(axis=0),
    }
    d_y = d_out @ p["f3b.w"].T
    d_site = d_y * (1.0 - y * y)
    grads["f3a.w"] = z.T @ d_site
    d_z = d_site @ p["f3a.w"].T
    d_h = d_z[:, :stem_width]
    d_g = d_z[:, stem_width:]

    d_a3 = d_g * (1.0 - g * g)
    grads["f2b.w"] = v.T @ d_a3
    grads["f2b.b"] = d_a3.sum(axis=0)
    d_v = d_a3 @ p["f2b.w"].T
    d_a2 = d_v * (1.0 - v * v)
    grads["f2a.w"] = h.T @ d_a2
    grads["f2a.b"] = d_a2.sum(axis=0)
    d_h = d_h + d_a2 @ p["f2a.w"].T

    d_a1 = d_h * (1.0 - h * h)
    grads["f1.w"] = u.T @ d_a1
    grads["f1.b"] = d_a1.sum(axis=0)
    return grads


def train_toy(dataset: DatasetSpec, config: TrainConfig, seed: int,
              arch: ModelArch | None = None) -> ToyDenoiser:
    """Train a fresh model; identical arguments give bit-identical weights."""
    arch = arch or ModelArch()
    model = ToyDenoiser.initialize(arch, seed)
    gen = np.random.Generator(np.random.Philox(seed + 1))

    moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in model.params.items()}
    b1, b2 = config.adam_beta1, config.adam_beta2
    final_loss = np.nan

    for it in range(1, config.iterations + 1):
        x0 = sample_dataset(dataset, config.batch_size, gen)
        idx = gen.integers(0, arch.steps, size=config.batch_size)
        eps = gen.standard_normal((config.batch_size, arch.data_dim))
        ab = model.alpha_bars[idx][:, None]
        x_noisy = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        temb = model.embed_array(idx)

        cache = _forward_cache(model, x_noisy, temb)
        eps_hat = cache[-1]
        final_loss = float(np.mean((eps_hat - eps) ** 2))
        if not np.isfinite(final_loss):
            raise FloatingPointError(f"training diverged at iteration {it}: loss={final_loss}")
        grads = _gradients(model, cache, eps)

        scale1 = 1.0 - b1 ** it
        scale2 = 1.0 - b2 ** it
        for name, grad in grads.items():
            m, v = moments[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            update = (m / scale1) / (np.sqrt(v / scale2) + config.adam_eps)
            model.params[name] -= config.learning_rate * update

    model.lineage = {
        "train_seed": seed,
        "dataset": asdict(dataset),
        "training": asdict(config),
        "final_loss": final_loss,
    }
    return model
