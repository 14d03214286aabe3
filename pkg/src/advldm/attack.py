"""Adversarial perturbations against the toy latent diffusion model.

Three objectives are maximised over an L-infinity ball around the clean image:

``semantic``  the model's own noise-prediction loss on ``x + delta``
``textural``  minus the latent distance ``||E(y) - E(x + delta)||_2`` to a target ``y``
``fused``     ``w * semantic - textural_distance``, both terms evaluated on the
              same sampled ``(t, eps)`` and sharing one encoder pass

Optimisation is sign-gradient ascent with per-step size ``alpha``, projection
onto ``[-budget, budget]`` and then onto valid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import ldm
from .data import IMAGE_SHAPE
from .ldm import ModelParams, NoiseSchedule
from .rng import Rng

MODES = ("semantic", "textural", "fused")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "fused"
    fused_weight: float = 1e4
    steps: int = 100
    step_size: float = 1 / 255
    budget: float = 17 / 255
    target: np.ndarray | None = field(default=None, repr=False, compare=False)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.step_size > 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if not self.budget > 0:
            raise ValueError(f"budget must be positive, got {self.budget}")
        if self.step_size > self.budget:
            raise ValueError(f"step size {self.step_size} exceeds budget {self.budget}")
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")
        if self.fused_weight < 0:
            raise ValueError(f"fused weight must be non-negative, got {self.fused_weight}")
        if self.mode in ("textural", "fused"):
            if self.target is None:
                raise ValueError(f"{self.mode} mode requires a target image")
            target = np.asarray(self.target, dtype=np.float64)
            if target.shape != IMAGE_SHAPE:
                raise ValueError(f"target must have shape {IMAGE_SHAPE}, got {target.shape}")
            object.__setattr__(self, "target", target)

    @property
    def weight(self) -> float:
        """Coefficient of the semantic term in the maximised objective."""
        return {"semantic": 1.0, "textural": 0.0, "fused": self.fused_weight}[self.mode]


@dataclass
class PerturbationResult:
    delta: np.ndarray
    adversarial: np.ndarray
    # one row per step: semantic term, textural term, objective
    loss_trace: np.ndarray
    # one row per step, after projection: max |delta|, min x', max x'
    audit: np.ndarray
    config: AttackConfig
    seed: int

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max())


# --------------------------------------------------------------------------
# objectives


def objective_graph(
    w: dict,
    schedule: NoiseSchedule,
    x: np.ndarray,
    delta: ad.Node,
    target_latent: np.ndarray | None,
    weight: float,
    mode: str,
    t,
    eps: np.ndarray,
):
    """Per-sample ``(objective, semantic, textural)`` nodes for a batch.

    The encoder runs once on ``x + delta``; its output feeds both the noised
    latent for the denoiser and the distance to the target latent.
    """
    z0 = ldm.encoder_graph(w, ad.add(delta, x))
    zt = ldm.add_noise_graph(schedule, z0, t, eps)
    semantic = ad.mse(ldm.denoiser_graph(w, zt, t, schedule.T), eps, axis=(1, 2, 3))
    if target_latent is None:
        return semantic, semantic, None
    textural = ad.l2norm(ad.sub(target_latent, z0), axis=(1, 2, 3))
    if mode == "textural":
        return -textural, semantic, textural
    return ad.sub(ad.scale(semantic, weight), textural), semantic, textural


def semantic_term(params: ModelParams, schedule: NoiseSchedule, x_prime, t, eps) -> float:
    """Single-draw Monte-Carlo estimate of the model's training loss at ``x_prime``."""
    return ldm.dm_loss(params, schedule, x_prime, t, eps)


def textural_term(params: ModelParams, x, delta, y) -> float:
    if y is None:
        raise ValueError("textural term needs a target image")
    zy = ldm.encode(params, y)
    zx = ldm.encode(params, np.asarray(x) + np.asarray(delta))
    return float(np.linalg.norm((zy - zx).ravel()))


def fused_objective(params, schedule, x, delta, y, w, t, eps) -> float:
    g = ad.Graph()
    consts = ldm.constants(g, params)
    zy = ldm.encode(params, y)[None]
    obj, _, _ = objective_graph(
        consts, schedule, np.asarray(x)[None], g.constant(np.asarray(delta)[None]),
        zy, w, "fused", np.atleast_1d(t), np.asarray(eps)[None],
    )
    return float(obj.value[0])


def objective_gradient(params, schedule, x, delta, target_latent, weight, mode, t, eps):
    """Objective values and gradient with respect to ``delta`` for a batch."""
    g = ad.Graph()
    consts = ldm.constants(g, params)
    d = g.leaf(delta)
    obj, sem, tex = objective_graph(consts, schedule, x, d, target_latent, weight, mode, t, eps)
    grad = g.backward(ad.sum(obj), [d])[d.id]
    tex_value = tex.value if tex is not None else np.full(len(x), np.nan)
    return obj.value, sem.value, tex_value, grad


# --------------------------------------------------------------------------
# PGD


def sign_pgd(
    grad_fn: Callable[[int, np.ndarray], np.ndarray],
    delta0: np.ndarray,
    step_size: float,
    budget: float,
    steps: int,
    x: np.ndarray | None = None,
    on_step: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Sign-gradient ascent projected onto the L-infinity ball of radius ``budget``.

    ``grad_fn(step, delta)`` returns the ascent gradient. When ``x`` is given
    the iterate is also folded back so that ``x + delta`` stays in ``[0, 1]``.
    """
    delta = np.array(delta0, dtype=np.float64)
    for step in range(steps):
        grad = grad_fn(step, delta)
        if not np.all(np.isfinite(grad)):
            raise AttackError(f"non-finite gradient at step {step}")
        delta = delta + step_size * np.sign(grad)
        delta = np.clip(delta, -budget, budget)
        if x is not None:
            delta = np.clip(x + delta, 0.0, 1.0) - x
        if on_step is not None:
            on_step(step, delta)
    return delta


def pgd_attack_batch(
    params: ModelParams, schedule: NoiseSchedule, x: np.ndarray, config: AttackConfig,
    first_index: int = 0, on_step: Callable[[int, np.ndarray], None] | None = None,
) -> list[PerturbationResult]:
    """Attack a batch of images in one vectorised run.

    Image ``i`` draws its ``(t, eps)`` pairs from its own stream
    ``Rng(config.seed).fork(first_index + i)``, so results do not depend on how
    images are grouped into batches beyond floating-point summation order.
    ``on_step(step, delta)`` sees the projected batch iterate after each step.
    The textural column of the loss trace is NaN in semantic mode.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape (n, *{IMAGE_SHAPE}), got {x.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("input images must lie in [0, 1]")
    n = len(x)
    root = Rng(config.seed)
    streams = [root.fork(first_index + i) for i in range(n)]
    target_latent = None
    if config.target is not None and config.mode != "semantic":
        target_latent = np.repeat(ldm.encode(params, config.target)[None], n, axis=0)

    trace = np.zeros((config.steps, n, 3))
    audit = np.zeros((config.steps, n, 3))

    def grad_fn(step, delta):
        # (t, eps) is drawn every step in every mode so streams stay aligned
        t = np.array([int(s.integers(1, schedule.T)) for s in streams])
        eps = np.stack([s.normal(ldm.LATENT_SHAPE) for s in streams])
        try:
            obj, sem, tex, grad = objective_gradient(
                params, schedule, x, delta, target_latent, config.weight, config.mode, t, eps
            )
        except ad.NumericError as exc:
            raise AttackError(f"numeric failure at step {step}: {exc}") from exc
        trace[step, :, 0] = sem
        trace[step, :, 1] = tex
        trace[step, :, 2] = obj
        return grad

    def record(step, delta):
        adv = x + delta
        audit[step, :, 0] = np.abs(delta).reshape(n, -1).max(axis=1)
        audit[step, :, 1] = adv.reshape(n, -1).min(axis=1)
        audit[step, :, 2] = adv.reshape(n, -1).max(axis=1)
        if on_step is not None:
            on_step(step, delta)

    delta = sign_pgd(grad_fn, np.zeros_like(x), config.step_size, config.budget, config.steps, x, record)
    return [
        PerturbationResult(
            delta=delta[i],
            adversarial=x[i] + delta[i],
            loss_trace=trace[:, i, :].copy(),
            audit=audit[:, i, :].copy(),
            config=config,
            seed=config.seed,
        )
        for i in range(n)
    ]


def pgd_attack(
    params: ModelParams, schedule: NoiseSchedule, x: np.ndarray, config: AttackConfig, on_step=None
) -> PerturbationResult:
    return pgd_attack_batch(params, schedule, np.asarray(x)[None], config, on_step=on_step)[0]


def attack_images(params, schedule, images, config: AttackConfig, batch_size: int = 16) -> np.ndarray:
    """Adversarial versions of ``images`` (n, 3, H, W), attacked in batches."""
    out = []
    for start in range(0, len(images), batch_size):
        results = pgd_attack_batch(params, schedule, images[start : start + batch_size], config, start)
        out.extend(r.adversarial for r in results)
    return np.stack(out)


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class ProbeRow:
    weight: float
    cos_semantic: float | None
    cos_textural: float | None


def _cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(a.ravel(), b.ravel()) / (na * nb), -1.0, 1.0))


def gradient_direction_probe(
    params: ModelParams,
    schedule: NoiseSchedule,
    x: np.ndarray,
    y: np.ndarray,
    w_list,
    t: int,
    eps: np.ndarray,
    delta: np.ndarray | None = None,
) -> list[ProbeRow]:
    """Cosine between the fused-mode gradient and each pure-mode gradient.

    All gradients are taken at the same ``(t, eps, delta)``. The textural-mode
    gradient is that of ``-||E(y) - E(x + delta)||``, the direction textural
    PGD ascends.
    """
    x = np.asarray(x, dtype=np.float64)[None]
    delta = np.zeros_like(x) if delta is None else np.asarray(delta, dtype=np.float64)[None]
    zy = ldm.encode(params, y)[None]
    t = np.atleast_1d(t)
    eps = np.asarray(eps)[None]
    _, _, _, g_sem = objective_gradient(params, schedule, x, delta, None, 1.0, "semantic", t, eps)
    _, _, _, g_tex = objective_gradient(params, schedule, x, delta, zy, 0.0, "textural", t, eps)
    rows = []
    for w in w_list:
        _, _, _, g = objective_gradient(params, schedule, x, delta, zy, float(w), "fused", t, eps)
        rows.append(ProbeRow(float(w), _cosine(g, g_sem), _cosine(g, g_tex)))
    return rows


def with_mode(config: AttackConfig, mode: str, **changes) -> AttackConfig:
    return replace(config, mode=mode, **changes)
