"""Finite-difference checks of every autodiff primitive and of the attack losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ldm
from .attack import objective_graph
from .data import TextureSpec, make_target, make_textures
from .ldm import ModelParams, NoiseSchedule
from .rng import Rng

GRADCHECK_TOL = 1e-5


@dataclass
class GradcheckRow:
    name: str
    rel_error: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.rel_error < GRADCHECK_TOL


def _weighted_sum(node: ad.Node, weights: np.ndarray) -> ad.Node:
    # a random linear read-out makes every output coordinate matter
    return ad.sum(ad.mul(node, weights))


def primitive_cases(rng: Rng) -> dict:
    """Scalar test functions of one leaf, keyed by primitive name, with their inputs."""
    r = lambda *shape: rng.normal(shape)  # noqa: E731
    a44, b44, w44 = r(4, 4, 8), r(4, 4, 8), r(4, 4, 8)
    img, img_w = r(2, 3, 8, 8), r(2, 3, 8, 8)
    k3, k1 = r(4, 3, 3, 3), r(4, 3, 1, 1)
    bias = r(4)
    out_s1, out_s2 = r(2, 4, 8, 8), r(2, 4, 4, 4)
    mat_a, mat_b = r(6, 8), r(8, 5)
    lin_w, lin_b, lin_out = r(5, 8), r(5), r(6, 5)
    up_w = r(2, 3, 16, 16)
    cat_other, cat_w = r(2, 2, 8, 8), r(2, 5, 8, 8)
    pos = np.abs(r(4, 4, 8)) + 0.5

    def conv_input(kernel, stride, out_w):
        return lambda x: _weighted_sum(ad.conv2d(x, kernel, bias, stride=stride), out_w)

    def conv_kernel(inp, stride, out_w):
        return lambda w: _weighted_sum(ad.conv2d(inp, w, bias, stride=stride), out_w)

    cases = {
        "add": (lambda x: _weighted_sum(ad.add(x, b44), w44), a44),
        "add_broadcast": (lambda x: _weighted_sum(ad.add(b44, x), w44), r(8)),
        "sub": (lambda x: _weighted_sum(ad.sub(b44, x), w44), a44),
        "scale": (lambda x: _weighted_sum(ad.scale(x, -2.5), w44), a44),
        "mul": (lambda x: _weighted_sum(ad.mul(x, b44), w44), a44),
        "mul_square": (lambda x: ad.sum(ad.mul(x, x)), a44),
        "silu": (lambda x: _weighted_sum(ad.silu(x), w44), a44),
        "sigmoid": (lambda x: _weighted_sum(ad.sigmoid(x), w44), a44),
        "sum": (lambda x: ad.sum(ad.mul(ad.sum(x, axis=2), w44[:, :, 0])), a44),
        "mean": (lambda x: ad.sum(ad.mul(ad.mean(x, axis=(0, 2)), w44[0, :, 0])), a44),
        "mse": (lambda x: ad.mse(x, b44), a44),
        "mse_axis": (lambda x: _weighted_sum(ad.mse(x, b44, axis=(1, 2)), w44[:, 0, 0]), a44),
        "l2norm": (lambda x: ad.l2norm(x), pos),
        "l2norm_axis": (lambda x: _weighted_sum(ad.l2norm(x, axis=(1, 2)), w44[:, 0, 0]), pos),
        "matmul": (lambda x: _weighted_sum(ad.matmul(x, mat_b), lin_out), mat_a),
        "matmul_right": (lambda b: _weighted_sum(ad.matmul(mat_a, b), lin_out), mat_b),
        "linear_input": (lambda x: _weighted_sum(ad.linear(x, lin_w, lin_b), lin_out), mat_a),
        "linear_weight": (lambda w: _weighted_sum(ad.linear(mat_a, w, lin_b), lin_out), lin_w),
        "reshape": (lambda x: _weighted_sum(ad.reshape(x, (16, 8)), w44.reshape(16, 8)), a44),
        "concat_channel": (lambda x: _weighted_sum(ad.concat_channel([x, cat_other]), cat_w), img),
        "upsample2x": (lambda x: _weighted_sum(ad.upsample2x(x), up_w), img),
        "conv3x3_s1_input": (conv_input(k3, 1, out_s1), img),
        "conv3x3_s2_input": (conv_input(k3, 2, out_s2), img),
        "conv3x3_s1_kernel": (conv_kernel(img, 1, out_s1), k3),
        "conv3x3_s2_kernel": (conv_kernel(img, 2, out_s2), k3),
        "conv1x1_input": (conv_input(k1, 1, out_s1), img),
        "conv1x1_kernel": (conv_kernel(img, 1, out_s1), k1),
        "conv_bias": (lambda b: _weighted_sum(ad.conv2d(img, k3, b, stride=1), out_s1), bias),
        "composite": (lambda x: ad.sum(ad.silu(ad.conv2d(ad.upsample2x(x), k3, bias, stride=2))), img * img_w),
    }
    return cases


def primitive_gradchecks(seed: int = 0, n_coords: int = 100, h: float = 1e-5) -> list[GradcheckRow]:
    rng = Rng(seed, stream=0x6C)
    rows = []
    for name, (f, x) in primitive_cases(rng).items():
        n = min(n_coords, x.size)
        err = ad.finite_diff_check(f, x, h=h, n_coords=n, rng=rng.fork(len(rows)))
        rows.append(GradcheckRow(name, err, n))
    return rows


def loss_gradchecks(
    params: ModelParams,
    schedule: NoiseSchedule,
    seed: int = 0,
    n_coords: int = 100,
    n_images: int = 5,
    h: float = 1e-5,
    fused_weight: float = 1e4,
    target_id: str = "stripes",
) -> list[GradcheckRow]:
    """Check the semantic, textural and fused losses with respect to ``delta``.

    Each image gets its own ``(t, eps)`` and a random starting perturbation
    inside the default budget, so the check is not only taken at ``delta = 0``.
    """
    rng = Rng(seed, stream=0x6D)
    images = make_textures(TextureSpec(count=n_images, seed=seed + 1)).images
    target_latent = ldm.encode(params, make_target(target_id))[None]
    rows = []
    for i, x in enumerate(images):
        r = rng.fork(i)
        t = np.array([int(r.integers(1, schedule.T))])
        eps = r.normal((1, *ldm.LATENT_SHAPE))
        delta0 = (r.uniform(x.shape) - 0.5) * (16 / 255)
        delta0 = np.clip(x + delta0, 0.0, 1.0) - x
        for mode, weight in (("semantic", 1.0), ("textural", 0.0), ("fused", fused_weight)):

            def f(d, mode=mode, weight=weight):
                consts = ldm.constants(d.graph, params)
                zy = None if mode == "semantic" else target_latent
                obj, _, _ = objective_graph(consts, schedule, x[None], d, zy, weight, mode, t, eps)
                return ad.sum(obj)

            err = ad.finite_diff_check(f, delta0[None], h=h, n_coords=n_coords, rng=r.fork(len(rows)))
            rows.append(GradcheckRow(f"{mode}_loss[{i}]", err, n_coords))
    return rows


def gradcheck_suite(params, schedule, seed: int = 0, n_coords: int = 100, n_images: int = 5) -> list[GradcheckRow]:
    return primitive_gradchecks(seed, n_coords) + loss_gradchecks(params, schedule, seed, n_coords, n_images)
