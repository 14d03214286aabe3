"""Desk-scale latent diffusion model.

Images are 3x32x32 in [0, 1]. The encoder maps them to 4x8x8 latents with two
stride-2 convolutions; the decoder mirrors it with nearest-neighbour
upsampling and ends in a sigmoid. The denoiser is a three-layer conv stack on
latents with a sinusoidal timestep embedding added after the first conv.

Diffusion runs on latents: ``z_t = sqrt(abar_t) E(x) + sqrt(1 - abar_t) eps``.
Timesteps are 1-based, ``t`` in ``1..T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import IMAGE_SHAPE, Dataset
from .rng import Rng

log = logging.getLogger(__name__)

LATENT_SHAPE = (4, 8, 8)
DEFAULT_T = 100
TIME_EMBED_DIM = 16

ARCHITECTURE: tuple[tuple[str, tuple[int, ...]], ...] = (
    ("enc.conv1.w", (16, 3, 3, 3)),
    ("enc.conv1.b", (16,)),
    ("enc.conv2.w", (32, 16, 3, 3)),
    ("enc.conv2.b", (32,)),
    ("enc.out.w", (4, 32, 1, 1)),
    ("enc.out.b", (4,)),
    ("dec.in.w", (32, 4, 1, 1)),
    ("dec.in.b", (32,)),
    ("dec.conv1.w", (16, 32, 3, 3)),
    ("dec.conv1.b", (16,)),
    ("dec.conv2.w", (16, 16, 3, 3)),
    ("dec.conv2.b", (16,)),
    ("dec.out.w", (3, 16, 3, 3)),
    ("dec.out.b", (3,)),
    ("den.conv1.w", (32, 4, 3, 3)),
    ("den.conv1.b", (32,)),
    ("den.temb.w", (32, TIME_EMBED_DIM)),
    ("den.temb.b", (32,)),
    ("den.conv2.w", (32, 32, 3, 3)),
    ("den.conv2.b", (32,)),
    ("den.out.w", (4, 32, 3, 3)),
    ("den.out.b", (4,)),
)
AUTOENCODER_KEYS = tuple(k for k, _ in ARCHITECTURE if k.startswith(("enc.", "dec.")))
DENOISER_KEYS = tuple(k for k, _ in ARCHITECTURE if k.startswith("den."))


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 2:
            raise ValueError("schedule needs at least two timesteps")
        if not (np.all(beta > 0) and np.all(beta < 1)):
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise ValueError("beta must be non-decreasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return self.alpha_bar[t - 1]


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule (the usual DDPM construction)."""
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


# --------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    version: int = 1

    def __post_init__(self):
        check_architecture(self.weights)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.weights[key]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.weights.items()}, self.version)

    def replace(self, **updates: np.ndarray) -> "ModelParams":
        weights = dict(self.weights)
        weights.update(updates)
        return ModelParams(weights, self.version)

    def equal(self, other: "ModelParams") -> bool:
        return all(np.array_equal(self.weights[k], other.weights[k]) for k, _ in ARCHITECTURE)


def check_architecture(weights: dict[str, np.ndarray]) -> None:
    for name, shape in ARCHITECTURE:
        if name not in weights:
            raise ValueError(f"missing weight tensor {name!r}")
        arr = weights[name]
        if tuple(arr.shape) != shape:
            raise ValueError(f"weight {name!r} has shape {tuple(arr.shape)}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"weight {name!r} contains non-finite values")
    extra = set(weights) - {n for n, _ in ARCHITECTURE}
    if extra:
        raise ValueError(f"unexpected weight tensors: {sorted(extra)}")


def init_params(rng: Rng) -> ModelParams:
    # output convs start small so an untrained denoiser predicts near-zero noise
    small = {"den.out.w": 0.1, "dec.out.w": 0.5}
    weights = {}
    for i, (name, shape) in enumerate(ARCHITECTURE):
        r = rng.fork(i)
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            weights[name] = r.normal(shape) * np.sqrt(2.0 / fan_in) * small.get(name, 1.0)
    return ModelParams(weights)


# --------------------------------------------------------------------------
# graph builders (batched, NCHW)


def constants(graph: ad.Graph, params: ModelParams, keys=None) -> dict[str, ad.Node]:
    keys = keys or [k for k, _ in ARCHITECTURE]
    return {k: graph.constant(params.weights[k]) for k in keys}


def encoder_graph(w, x: ad.Node) -> ad.Node:
    h = ad.silu(ad.conv2d(x, w["enc.conv1.w"], w["enc.conv1.b"], stride=2))
    h = ad.silu(ad.conv2d(h, w["enc.conv2.w"], w["enc.conv2.b"], stride=2))
    return ad.conv2d(h, w["enc.out.w"], w["enc.out.b"])


def decoder_graph(w, z: ad.Node) -> ad.Node:
    h = ad.silu(ad.conv2d(z, w["dec.in.w"], w["dec.in.b"]))
    h = ad.upsample2x(h)
    h = ad.silu(ad.conv2d(h, w["dec.conv1.w"], w["dec.conv1.b"]))
    h = ad.upsample2x(h)
    h = ad.silu(ad.conv2d(h, w["dec.conv2.w"], w["dec.conv2.b"]))
    return ad.sigmoid(ad.conv2d(h, w["dec.out.w"], w["dec.out.b"]))


def time_embedding(t, T: int) -> np.ndarray:
    """Sinusoidal embedding of ``t / T``; shape (len(t), TIME_EMBED_DIM)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = TIME_EMBED_DIM // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    pos = 1000.0 * (t / T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(pos), np.cos(pos)], axis=1)


def denoiser_graph(w, z: ad.Node, t, T: int) -> ad.Node:
    emb = time_embedding(t, T)
    n = z.shape[0]
    if len(emb) == 1 and n > 1:
        emb = np.repeat(emb, n, axis=0)
    temb = ad.linear(z.graph.constant(emb), w["den.temb.w"], w["den.temb.b"])
    h = ad.conv2d(z, w["den.conv1.w"], w["den.conv1.b"])
    h = ad.silu(ad.add(h, ad.reshape(temb, (n, temb.shape[1], 1, 1))))
    h = ad.silu(ad.conv2d(h, w["den.conv2.w"], w["den.conv2.b"]))
    return ad.conv2d(h, w["den.out.w"], w["den.out.b"])


def add_noise_graph(schedule: NoiseSchedule, z0: ad.Node, t, eps: np.ndarray) -> ad.Node:
    t = np.atleast_1d(t)
    abar = schedule.abar(t).reshape(-1, 1, 1, 1)
    return ad.add(ad.mul(z0, np.sqrt(abar)), np.sqrt(1.0 - abar) * eps)


def dm_loss_graph(w, schedule: NoiseSchedule, x: ad.Node, t, eps: np.ndarray) -> ad.Node:
    """Per-sample noise-prediction MSE, shape (batch,)."""
    z0 = encoder_graph(w, x)
    zt = add_noise_graph(schedule, z0, t, eps)
    pred = denoiser_graph(w, zt, t, schedule.T)
    return ad.mse(pred, eps, axis=(1, 2, 3))


# --------------------------------------------------------------------------
# array-level API


def _batched(x: np.ndarray, item_shape: tuple, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == item_shape:
        return x[None], True
    if x.ndim == len(item_shape) + 1 and x.shape[1:] == item_shape:
        return x, False
    raise ValueError(f"{what}: expected shape {item_shape} or (n, *{item_shape}), got {x.shape}")


def _check_image_range(x: np.ndarray, what: str) -> None:
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"{what}: pixel values must lie in [0, 1]")


def encode(params: ModelParams, x: np.ndarray) -> np.ndarray:
    xb, single = _batched(x, IMAGE_SHAPE, "encode")
    _check_image_range(xb, "encode")
    g = ad.Graph()
    z = encoder_graph(constants(g, params, AUTOENCODER_KEYS), g.constant(xb)).value
    return z[0] if single else z


def decode(params: ModelParams, z: np.ndarray) -> np.ndarray:
    zb, single = _batched(z, LATENT_SHAPE, "decode")
    g = ad.Graph()
    x = decoder_graph(constants(g, params, AUTOENCODER_KEYS), g.constant(zb)).value
    return x[0] if single else x


def add_noise(schedule: NoiseSchedule, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"add_noise: eps shape {eps.shape} does not match latent {z0.shape}")
    abar = schedule.abar(t)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def denoiser_forward(params: ModelParams, z_t: np.ndarray, t, T: int = DEFAULT_T) -> np.ndarray:
    zb, single = _batched(z_t, LATENT_SHAPE, "denoiser_forward")
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timestep out of range 1..{T}: {t}")
    g = ad.Graph()
    out = denoiser_graph(constants(g, params, DENOISER_KEYS), g.constant(zb), t, T).value
    return out[0] if single else out


def dm_loss(params: ModelParams, schedule: NoiseSchedule, x_prime: np.ndarray, t, eps) -> float | np.ndarray:
    """``mean((eps - eps_theta(z_t, t))**2)`` with ``z_t`` noised from ``E(x_prime)``."""
    xb, single = _batched(x_prime, IMAGE_SHAPE, "dm_loss")
    eps = np.asarray(eps, dtype=np.float64).reshape((len(xb),) + LATENT_SHAPE)
    g = ad.Graph()
    out = dm_loss_graph(constants(g, params), schedule, g.constant(xb), t, eps).value
    return float(out[0]) if single else out


# --------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    autoencoder: list[float] = field(default_factory=list)
    denoiser: list[float] = field(default_factory=list)


class Adam:
    """Adam moments for a subset of weights; updates are plain numpy."""

    def __init__(self, lr: float, keys, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.keys = tuple(keys)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.count = 0

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.count += 1
        c1 = 1.0 - self.beta1**self.count
        c2 = 1.0 - self.beta2**self.count
        out = {}
        for k in self.keys:
            g = grads[k]
            self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            out[k] = weights[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def _descend(params: ModelParams, opt: Adam, loss_fn, phase: str, step: int):
    g = ad.Graph()
    w = constants(g, params)
    for k in opt.keys:
        w[k] = g.leaf(params.weights[k])
    try:
        loss = loss_fn(g, w)
        grads = g.backward(loss, [w[k] for k in opt.keys])
    except ad.NumericError as exc:
        raise TrainingError(f"{phase} phase diverged at step {step}: {exc}") from exc
    value = float(loss.value)
    updated = opt.step(params.weights, {k: grads[w[k].id] for k in opt.keys})
    for k, arr in updated.items():
        if not np.all(np.isfinite(arr)):
            raise TrainingError(f"{phase} phase diverged at step {step}: non-finite update of {k}")
    return params.replace(**updated), value


def _normalise_latents(params: ModelParams, images: np.ndarray) -> ModelParams:
    # rescale the encoder output (and undo it at the decoder input) so that
    # latents have unit standard deviation; the autoencoder map is unchanged
    std = float(encode(params, images).std())
    return params.replace(
        **{
            "enc.out.w": params["enc.out.w"] / std,
            "enc.out.b": params["enc.out.b"] / std,
            "dec.in.w": params["dec.in.w"] * std,
        }
    )


def train_autoencoder(params, dataset: Dataset, steps: int, lr: float, rng: Rng, batch_size: int = 16):
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    images = dataset.images
    opt = Adam(lr, AUTOENCODER_KEYS)
    losses = []
    for step in range(steps):
        batch = images[rng.integers(0, len(images) - 1, (batch_size,))]

        def loss_fn(g, w):
            return ad.mse(decoder_graph(w, encoder_graph(w, g.constant(batch))), batch)

        params, value = _descend(params, opt, loss_fn, "autoencoder", step)
        losses.append(value)
    return params, losses


def train_denoiser(
    params, schedule: NoiseSchedule, dataset: Dataset, steps: int, lr: float, rng: Rng,
    batch_size: int = 16, phase: str = "denoiser",
):
    """Noise-prediction descent on the denoiser only; the autoencoder is frozen."""
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    latents = encode(params, dataset.images)
    opt = Adam(lr, DENOISER_KEYS)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(latents) - 1, (batch_size,))
        t = rng.integers(1, schedule.T, (batch_size,))
        eps = rng.normal((batch_size,) + LATENT_SHAPE)
        zt = np.sqrt(schedule.abar(t))[:, None, None, None] * latents[idx] + (
            np.sqrt(1.0 - schedule.abar(t))[:, None, None, None] * eps
        )

        def loss_fn(g, w):
            return ad.mse(denoiser_graph(w, g.constant(zt), t, schedule.T), eps)

        params, value = _descend(params, opt, loss_fn, phase, step)
        losses.append(value)
    return params, losses


def train(
    params: ModelParams,
    schedule: NoiseSchedule,
    dataset: Dataset,
    steps: int = 3000,
    lr: float = 3e-3,
    rng: Rng | None = None,
    *,
    dm_steps: int | None = None,
    dm_lr: float = 1e-3,
    batch_size: int = 16,
) -> tuple[ModelParams, TrainLog]:
    """Two-phase training: autoencoder reconstruction, then the denoiser on frozen latents."""
    rng = rng if rng is not None else Rng(0)
    dm_steps = steps if dm_steps is None else dm_steps
    if steps < 1 or dm_steps < 1:
        raise ValueError("training needs at least one step per phase")
    trace = TrainLog()
    params, trace.autoencoder = train_autoencoder(
        params, dataset, steps, lr, rng.fork(1), batch_size
    )
    params = _normalise_latents(params, dataset.images)
    params, trace.denoiser = train_denoiser(
        params, schedule, dataset, dm_steps, dm_lr, rng.fork(2), batch_size
    )
    return params, trace


def finetune(
    params: ModelParams,
    schedule: NoiseSchedule,
    dataset: Dataset,
    steps: int = 400,
    lr: float = 1e-3,
    rng: Rng | None = None,
    batch_size: int = 16,
) -> ModelParams:
    """Retrain only the denoiser on ``dataset``; encoder and decoder stay frozen."""
    rng = rng if rng is not None else Rng(0)
    params, _ = train_denoiser(params, schedule, dataset, steps, lr, rng, batch_size, "finetune")
    return params


# --------------------------------------------------------------------------
# sampling


def reverse_process(
    params: ModelParams, schedule: NoiseSchedule, z: np.ndarray, t_start: int, rng: Rng
) -> np.ndarray:
    """Ancestral DDPM steps from ``t_start`` down to 1 on a batch of latents."""
    n = len(z)
    for t in range(t_start, 0, -1):
        g = ad.Graph()
        w = constants(g, params, DENOISER_KEYS)
        eps_hat = denoiser_graph(w, g.constant(z), np.full(n, t), schedule.T).value
        beta = schedule.beta[t - 1]
        abar = schedule.alpha_bar[t - 1]
        z = (z - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)
        if t > 1:
            z = z + np.sqrt(beta) * rng.normal(z.shape)
    return z


def sample(params: ModelParams, schedule: NoiseSchedule, n: int, rng: Rng) -> np.ndarray:
    z = rng.normal((n,) + LATENT_SHAPE)
    z = reverse_process(params, schedule, z, schedule.T, rng)
    return decode(params, z)
