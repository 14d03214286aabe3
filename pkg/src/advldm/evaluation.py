"""Robustness and imitation metrics for perturbed image sets.

The feature space for the Frechet and precision metrics is the toy encoder's
latent, average-pooled over 2x2 blocks (4 channels x 4 x 4 = 64 features).
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import attack as atk
from . import ldm
from .data import TARGET_IDS, TARGET_LABELS, Dataset, make_target
from .ldm import LATENT_SHAPE, ModelParams, NoiseSchedule
from .rng import Rng

DEFAULT_CROP_PX = 4
DEFAULT_STRENGTHS = (0.25, 0.35, 0.5)
DEFAULT_SAMPLES = 50
FRECHET_EPS = 1e-6
PSNR_CAP = 100.0

CSV_COLUMNS = (
    "scenario",
    "mode",
    "transform",
    "target_id",
    "w",
    "frechet_proxy",
    "precision",
    "mean_dm_loss",
    "mean_latent_distance",
    "mean_psnr",
    "seed",
)


# --------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "none"
    crop_px: int = DEFAULT_CROP_PX
    budget: float = 17 / 255

    def __post_init__(self):
        if self.kind not in ("none", "crop_resize", "gaussian"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.crop_px < 0:
            raise ValueError(f"crop_px must be non-negative, got {self.crop_px}")
        if self.kind == "gaussian" and not self.budget > 0:
            raise ValueError(f"gaussian budget must be positive, got {self.budget}")

    @property
    def label(self) -> str:
        return self.kind


def _resize_matrix(n_out: int, n_in: int) -> np.ndarray:
    # bilinear weights with half-pixel centres, edge samples clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rh = _resize_matrix(height, x.shape[-2])
    rw = _resize_matrix(width, x.shape[-1])
    return np.einsum("ij,...jk,lk->...il", rh, x, rw)


def crop_and_resize(x: np.ndarray, crop_px: int = DEFAULT_CROP_PX) -> np.ndarray:
    """Central crop of ``crop_px`` on every side, resized back to the input size."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if crop_px < 0 or 2 * crop_px >= min(h, w):
        raise ValueError(f"crop of {crop_px} px per side is too large for a {h}x{w} image")
    if crop_px == 0:
        return x.copy()
    cropped = x[..., crop_px : h - crop_px, crop_px : w - crop_px]
    return np.clip(resize_bilinear(cropped, h, w), 0.0, 1.0)


def gaussian_baseline(x: np.ndarray, budget: float, rng: Rng) -> np.ndarray:
    """Gaussian noise with sigma = budget / 2, clipped to the L-inf budget and to [0, 1]."""
    if not budget > 0:
        raise ValueError(f"budget must be positive, got {budget}")
    x = np.asarray(x, dtype=np.float64)
    noise = np.clip(rng.normal(x.shape) * (budget / 2.0), -budget, budget)
    return np.clip(x + noise, 0.0, 1.0)


def apply_transform(images: np.ndarray, spec: TransformSpec, rng: Rng | None = None) -> np.ndarray:
    if spec.kind == "none":
        return np.asarray(images, dtype=np.float64).copy()
    if spec.kind == "crop_resize":
        return crop_and_resize(images, spec.crop_px)
    return gaussian_baseline(images, spec.budget, rng if rng is not None else Rng(0))


# --------------------------------------------------------------------------
# metrics


def feature_extract(params: ModelParams, images: np.ndarray) -> np.ndarray:
    z = ldm.encode(params, np.asarray(images).reshape((-1,) + np.shape(images)[-3:]))
    n, c, h, w = z.shape
    pooled = z.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return pooled.reshape(n, -1)


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_proxy(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Covariances get ``FRECHET_EPS * I``; the trace of ``(Sa Sb)^(1/2)`` is
    computed from the symmetric matrix ``Sa^(1/2) Sb Sa^(1/2)``, which has the
    same eigenvalues.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("Frechet distance needs at least two samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    eye = FRECHET_EPS * np.eye(a.shape[1])
    cov_a = np.cov(a, rowvar=False) + eye
    cov_b = np.cov(b, rowvar=False) + eye
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean(axis=0) - b.mean(axis=0)
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def precision_knn(real_feats: np.ndarray, gen_feats: np.ndarray, k: int = 3) -> float:
    """Fraction of generated points inside some real point's k-NN ball."""
    real = np.asarray(real_feats, dtype=np.float64)
    gen = np.asarray(gen_feats, dtype=np.float64)
    if len(real) == 0 or len(gen) == 0:
        raise ValueError("precision needs non-empty real and generated sets")
    if k < 1 or len(real) <= k:
        raise ValueError(f"need 1 <= k < number of real samples, got k={k}, n={len(real)}")
    d_real = cdist(real, real)
    # column 0 of the sorted row is the point itself
    radii = np.sort(d_real, axis=1)[:, k]
    d_cross = cdist(real, gen)
    return float((d_cross <= radii[:, None]).any(axis=0).mean())


def psnr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image PSNR with peak 1.0, capped at ``PSNR_CAP`` dB for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        value = 10.0 * np.log10(1.0 / mse)
    return np.minimum(value, PSNR_CAP)


def eval_draws(schedule: NoiseSchedule, n_draws: int = 500, seed: int = 12345):
    """Fixed (t, eps) evaluation set shared by every image and condition."""
    rng = Rng(seed, stream=0xE7A1)
    t = rng.integers(1, schedule.T, (n_draws,))
    eps = rng.normal((n_draws,) + LATENT_SHAPE)
    return t, eps


def mean_dm_loss(params, schedule, images, n_draws: int = 500, seed: int = 12345) -> np.ndarray:
    """Per-image noise-prediction loss averaged over a fixed draw set."""
    t, eps = eval_draws(schedule, n_draws, seed)
    z = ldm.encode(params, images)
    abar = schedule.abar(t)[:, None, None, None]
    out = np.empty(len(z))
    for i, zi in enumerate(z):
        zt = np.sqrt(abar) * zi[None] + np.sqrt(1.0 - abar) * eps
        pred = ldm.denoiser_forward(params, zt, t, schedule.T)
        out[i] = ((pred - eps) ** 2).mean()
    return out


def latent_distance(params, images, reference) -> np.ndarray:
    za = ldm.encode(params, images)
    zb = ldm.encode(params, reference)
    return np.sqrt(((za - zb) ** 2).reshape(len(za), -1).sum(axis=1))


# --------------------------------------------------------------------------
# scenarios


@dataclass
class MetricReport:
    frechet_proxy: float
    precision: float
    mean_dm_loss: float
    mean_latent_distance: float
    mean_psnr: float
    scenario: str = ""
    transform: str = "none"
    mode: str = "none"
    target_id: str = "none"
    w: float = 0.0
    seed: int = 0
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("frechet_proxy", "precision", "mean_dm_loss", "mean_latent_distance", "mean_psnr"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValueError(f"metric {name} is not finite: {value}")
        if not 0.0 <= self.precision <= 1.0:
            raise ValueError(f"precision out of [0, 1]: {self.precision}")
        if self.frechet_proxy < 0.0:
            raise ValueError(f"negative Frechet proxy: {self.frechet_proxy}")

    def row(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return {k: d[k] for k in CSV_COLUMNS}


def scenario_frozen(
    params: ModelParams,
    schedule: NoiseSchedule,
    images: np.ndarray,
    reference: np.ndarray | None = None,
    strengths=DEFAULT_STRENGTHS,
    seed: int = 0,
    k: int = 3,
) -> MetricReport:
    """Frozen-weights image-to-image: partially noise, denoise back, decode.

    Metrics compare reconstructions against ``reference`` (the clean images;
    defaults to ``images``) and are pooled over all strengths.
    """
    images = np.asarray(images, dtype=np.float64)
    reference = images if reference is None else np.asarray(reference, dtype=np.float64)
    z0 = ldm.encode(params, images)
    rng = Rng(seed, stream=0xF207)
    recons = []
    for s in strengths:
        t0 = int(round(s * schedule.T))
        if not 1 <= t0 <= schedule.T:
            raise ValueError(f"strength {s} maps outside 1..{schedule.T}")
        zt = ldm.add_noise(schedule, z0, t0, rng.normal(z0.shape))
        recons.append(ldm.decode(params, ldm.reverse_process(params, schedule, zt, t0, rng)))
    recon = np.concatenate(recons)
    ref_rep = np.concatenate([reference] * len(strengths))
    ref_feats = feature_extract(params, reference)
    gen_feats = feature_extract(params, recon)
    return MetricReport(
        frechet_proxy=frechet_proxy(gen_feats, ref_feats),
        precision=precision_knn(ref_feats, gen_feats, k) if len(reference) > k else 0.0,
        mean_dm_loss=float(mean_dm_loss(params, schedule, images).mean()),
        mean_latent_distance=float(latent_distance(params, images, reference).mean()),
        mean_psnr=float(psnr(recon, ref_rep).mean()),
        scenario="frozen",
        seed=seed,
        extra={"reconstructions": recon},
    )


def scenario_finetune(
    params: ModelParams,
    schedule: NoiseSchedule,
    train_images: np.ndarray,
    reference: np.ndarray | None = None,
    n_samples: int = DEFAULT_SAMPLES,
    steps: int = 400,
    lr: float = 1e-3,
    seed: int = 0,
    k: int = 3,
) -> MetricReport:
    """Fine-tune the denoiser on ``train_images``, sample, compare with ``reference``."""
    train_images = np.asarray(train_images, dtype=np.float64)
    reference = train_images if reference is None else np.asarray(reference, dtype=np.float64)
    root = Rng(seed, stream=0xF17E)
    tuned = ldm.finetune(params, schedule, Dataset(train_images), steps, lr, root.fork(1))
    samples = ldm.sample(tuned, schedule, n_samples, root.fork(2))
    ref_feats = feature_extract(params, reference)
    gen_feats = feature_extract(params, samples)
    paired = len(reference) == len(train_images)
    return MetricReport(
        frechet_proxy=frechet_proxy(gen_feats, ref_feats),
        precision=precision_knn(ref_feats, gen_feats, k),
        mean_dm_loss=float(mean_dm_loss(params, schedule, train_images).mean()),
        mean_latent_distance=float(latent_distance(params, train_images, reference).mean()) if paired else 0.0,
        mean_psnr=float(psnr(train_images, reference).mean()) if paired else 0.0,
        scenario="finetune",
        seed=seed,
        extra={"samples": samples},
    )


def run_scenario(scenario: str, params, schedule, images, reference, seed: int, n_samples: int = DEFAULT_SAMPLES, **kw):
    if scenario == "frozen":
        return scenario_frozen(params, schedule, images, reference, seed=seed, **kw)
    if scenario == "finetune":
        return scenario_finetune(params, schedule, images, reference, n_samples=n_samples, seed=seed, **kw)
    raise ValueError(f"unknown scenario {scenario!r}")


def robustness_grid(
    params: ModelParams,
    schedule: NoiseSchedule,
    images: np.ndarray,
    config: atk.AttackConfig,
    scenario: str = "finetune",
    modes=atk.MODES,
    transforms=("none", "crop_resize"),
    crop_px: int = DEFAULT_CROP_PX,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    **scenario_kw,
) -> list[MetricReport]:
    """Clean, gaussian-noise and attacked conditions under each input transform."""
    images = np.asarray(images, dtype=np.float64)
    conditions = [("none", images, "none", 0.0)]
    conditions.append(("gaussian", gaussian_baseline(images, config.budget, Rng(seed, stream=0x6A55)), "none", 0.0))
    for mode in modes:
        cfg = atk.with_mode(config, mode)
        adv = atk.attack_images(params, schedule, images, cfg)
        target_id = config_target_id(cfg)
        conditions.append((mode, adv, target_id, cfg.fused_weight if mode == "fused" else 0.0))

    reports = []
    for mode, perturbed, target_id, w in conditions:
        for kind in transforms:
            spec = TransformSpec(kind, crop_px=crop_px, budget=config.budget)
            inputs = apply_transform(perturbed, spec, Rng(seed, stream=0x7F))
            rep = run_scenario(scenario, params, schedule, inputs, images, seed, n_samples, **scenario_kw)
            rep.mode, rep.transform, rep.target_id, rep.w = mode, spec.label, target_id, w
            reports.append(rep)
    return reports


def config_target_id(config: atk.AttackConfig) -> str:
    if config.mode == "semantic" or config.target is None:
        return "none"
    for tid in TARGET_IDS:
        if np.array_equal(config.target, make_target(tid)):
            return tid
    return "custom"


def target_comparison(
    params: ModelParams,
    schedule: NoiseSchedule,
    x_set: np.ndarray,
    config: atk.AttackConfig,
    target_ids=TARGET_IDS,
    transforms=("none", "crop_resize"),
    crop_px: int = DEFAULT_CROP_PX,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    **scenario_kw,
) -> list[MetricReport]:
    """Fine-tune scenario per target image, plus the unattacked baseline.

    ``mean_latent_distance`` is the displacement ``||E(x') - E(x)||`` caused
    by the attack, measured before any input transform.
    """
    if config.mode not in ("textural", "fused"):
        raise ValueError("target comparison needs textural or fused mode")
    x_set = np.asarray(x_set, dtype=np.float64)
    conditions = [("none", "none", x_set)]
    for tid in target_ids:
        cfg = atk.with_mode(config, config.mode, target=make_target(tid))
        conditions.append((config.mode, tid, atk.attack_images(params, schedule, x_set, cfg)))

    reports = []
    for mode, tid, adv in conditions:
        displacement = float(latent_distance(params, adv, x_set).mean())
        for kind in transforms:
            spec = TransformSpec(kind, crop_px=crop_px)
            inputs = apply_transform(adv, spec)
            rep = scenario_finetune(params, schedule, inputs, x_set, n_samples=n_samples, seed=seed, **scenario_kw)
            rep.mode, rep.transform, rep.target_id = mode, spec.label, tid
            rep.w = config.fused_weight if mode == "fused" else 0.0
            rep.mean_latent_distance = displacement
            reports.append(rep)
    return reports


# --------------------------------------------------------------------------
# CSV


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".6g")
    return str(value)


def reports_to_csv(reports, path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in reports:
        row = rep.row()
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def target_table_rows(reports) -> list[dict]:
    """Pivot target-comparison reports to one row per target.

    Each transform contributes a ``frechet_<transform>`` and a
    ``precision_<transform>`` column, so the table has one row for the
    unattacked baseline and one per target image.
    """
    rows: dict[str, dict] = {}
    for rep in reports:
        row = rows.setdefault(
            rep.target_id,
            {
                "label": TARGET_LABELS.get(rep.target_id, rep.target_id),
                "target_id": rep.target_id,
                "mode": rep.mode,
                "mean_latent_distance": rep.mean_latent_distance,
                "seed": rep.seed,
            },
        )
        row[f"frechet_{rep.transform}"] = rep.frechet_proxy
        row[f"precision_{rep.transform}"] = rep.precision
    return list(rows.values())


def target_table_csv(reports, path=None) -> str:
    rows = target_table_rows(reports)
    columns = list(rows[0]) if rows else []
    for row in rows:
        columns += [c for c in row if c not in columns]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
