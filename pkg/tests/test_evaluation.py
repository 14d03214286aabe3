import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from advldm import attack as atk
from advldm import evaluation as ev
from advldm import ldm
from advldm.data import TARGET_IDS, make_target
from advldm.rng import Rng


@pytest.fixture(scope="module")
def model():
    return ldm.init_params(Rng(31)), ldm.make_schedule()


# transforms


def test_crop_zero_is_identity(images):
    assert np.array_equal(ev.crop_and_resize(images, 0), images)
    assert np.array_equal(ev.resize_bilinear(images, 32, 32), images)


def test_constant_image_stays_constant():
    x = np.full((3, 32, 32), 0.3)
    assert np.allclose(ev.crop_and_resize(x, 4), 0.3, rtol=0, atol=1e-15)


def test_checkerboard_hand_bilinear():
    board = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(float)[None]
    out = ev.crop_and_resize(board, 1)[0]
    # the 2x2 centre [[0, 1], [1, 0]] resampled with half-pixel centres:
    # output rows/cols 1 and 2 sit at source positions 0.25 and 0.75
    assert out[1, 1] == pytest.approx(0.75 * 0.25 + 0.25 * 0.75)
    assert out[1, 2] == pytest.approx(0.75 * 0.75 + 0.25 * 0.25)
    assert out[2, 1] == pytest.approx(out[1, 2])
    assert out[2, 2] == pytest.approx(out[1, 1])


def test_crop_too_large_rejected():
    with pytest.raises(ValueError):
        ev.crop_and_resize(np.zeros((3, 8, 8)), 4)
    with pytest.raises(ValueError):
        ev.TransformSpec("crop_resize", crop_px=-1)


@given(hnp.arrays(np.float64, (3, 12, 12), elements=st.floats(0, 1)), st.integers(0, 5))
@settings(max_examples=30, deadline=None)
def test_transforms_stay_in_range(x, crop):
    out = ev.crop_and_resize(x, crop)
    assert out.min() >= 0.0 and out.max() <= 1.0
    g = ev.gaussian_baseline(x, 17 / 255, Rng(crop))
    assert g.min() >= 0.0 and g.max() <= 1.0
    assert np.abs(g - x).max() <= 17 / 255 + 1e-15


def test_gaussian_saturates_budget():
    budget = 17 / 255
    x = np.full((3, 32, 32), 0.5)
    rng = Rng(0)
    peaks = [np.abs(ev.gaussian_baseline(x, budget, rng) - x).max() for _ in range(100)]
    assert all(0.8 * budget < p <= budget for p in peaks)
    tiny = ev.gaussian_baseline(x, 1e-12, Rng(1))
    assert np.abs(tiny - x).max() <= 1e-12


# metrics


def test_feature_shape_and_pooling_oracle(model):
    params, _ = model
    x = np.full((1, 3, 32, 32), 0.4)
    f = ev.feature_extract(params, x)
    assert f.shape == (1, 64)
    z = ldm.encode(params, x[0])
    manual = np.array([[z[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean() for i in range(4) for j in range(4)] for c in range(4)])
    assert np.allclose(f[0], manual.ravel(), rtol=0, atol=1e-14)


def test_frechet_identity_symmetry_and_1d():
    rng = Rng(2)
    a = rng.normal((200, 5))
    b = rng.normal((150, 5)) * 1.5 + 0.3
    assert ev.frechet_proxy(a, a) < 1e-8
    assert abs(ev.frechet_proxy(a, b) - ev.frechet_proxy(b, a)) < 1e-8
    x = 1.0 + 2.0 * Rng(3).normal((20000, 1))
    y = -0.5 + 0.5 * Rng(4).normal((20000, 1))
    analytic = (1.0 + 0.5) ** 2 + (2.0 - 0.5) ** 2
    assert ev.frechet_proxy(x, y) == pytest.approx(analytic, rel=0.03)
    with pytest.raises(ValueError):
        ev.frechet_proxy(a[:1], b)


def test_precision_oracles():
    rng = Rng(5)
    real = rng.normal((20, 2))
    assert ev.precision_knn(real, real, 3) == 1.0
    assert ev.precision_knn(real, real + 100.0, 3) == 0.0
    gen = rng.normal((30, 2)) * 1.5
    # brute force: radius of each real point = distance to its 3rd other point
    count = 0
    for g in gen:
        inside = False
        for i, r in enumerate(real):
            others = sorted(np.hypot(*(real[j] - r)) for j in range(20) if j != i)
            if np.hypot(*(g - r)) <= others[2]:
                inside = True
        count += inside
    assert ev.precision_knn(real, gen, 3) == count / 30
    with pytest.raises(ValueError):
        ev.precision_knn(real[:3], gen, 3)
    with pytest.raises(ValueError):
        ev.precision_knn(real, gen[:0], 3)


def test_psnr():
    a = np.zeros((2, 3, 4, 4))
    b = a.copy()
    b[1] += 0.1
    p = ev.psnr(a, b)
    assert p[0] == ev.PSNR_CAP and p[1] == pytest.approx(20.0)


def test_report_invariants():
    with pytest.raises(ValueError):
        ev.MetricReport(1.0, 1.5, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ev.MetricReport(float("nan"), 0.5, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ev.MetricReport(-1.0, 0.5, 0.0, 0.0, 0.0)


# scenarios and reports


def test_frozen_scenario_runs_and_is_deterministic(model, images):
    params, s = model
    a = ev.scenario_frozen(params, s, images, seed=3)
    b = ev.scenario_frozen(params, s, images, seed=3)
    assert a.row() == b.row()
    assert a.extra["reconstructions"].shape == (3 * len(images), 3, 32, 32)


def test_finetune_scenario_deterministic(model, images):
    params, s = model
    a = ev.scenario_finetune(params, s, images, n_samples=6, steps=3, seed=1)
    b = ev.scenario_finetune(params, s, images, n_samples=6, steps=3, seed=1)
    assert a.row() == b.row()
    assert 0.0 <= a.precision <= 1.0 and a.frechet_proxy >= 0.0


def test_robustness_grid_and_csv(model, images, tmp_path):
    params, s = model
    cfg = atk.AttackConfig(steps=2, target=make_target("stripes"))
    reports = ev.robustness_grid(params, s, images, cfg, n_samples=6, steps=2)
    assert len(reports) == (2 + 3) * 2
    assert [r.mode for r in reports[::2]] == ["none", "gaussian", "semantic", "textural", "fused"]
    text = ev.reports_to_csv(reports, tmp_path / "r.csv")
    assert "\r" not in text
    rows = ev.read_csv(tmp_path / "r.csv")
    assert list(rows[0]) == list(ev.CSV_COLUMNS) and len(rows) == 10
    assert rows[-1]["target_id"] == "stripes" and rows[-1]["w"] == "10000"
    for row in rows:
        for key in ("frechet_proxy", "precision", "mean_dm_loss", "mean_latent_distance", "mean_psnr"):
            v = row[key]
            assert np.isfinite(float(v))
            assert len(v.replace("-", "").replace(".", "").split("e")[0].lstrip("0")) <= 6


def test_target_comparison_table(model, images):
    params, s = model
    cfg = atk.AttackConfig(mode="textural", steps=2, target=make_target("zero"))
    reports = ev.target_comparison(params, s, images, cfg, n_samples=6, steps=2)
    assert len(reports) == 10
    table = ev.target_table_rows(reports)
    assert [r["label"] for r in table] == ["No Attack", "Zero_Target", "Target1", "Target2", "Target_Logo"]
    assert set(table[0]) >= {"frechet_none", "precision_none", "frechet_crop_resize", "precision_crop_resize"}
    with pytest.raises(ValueError):
        ev.target_comparison(params, s, images, atk.AttackConfig(mode="semantic"))


def test_zero_target_on_black_image_is_a_no_op(model):
    params, s = model
    black = np.zeros((3, 32, 32))
    cfg = atk.AttackConfig(mode="textural", steps=5, target=make_target("zero"))
    res = atk.pgd_attack(params, s, black, cfg)
    assert np.all(res.loss_trace[:, 1] == 0.0)
    assert np.array_equal(res.delta, np.zeros_like(black))


def test_targets_are_as_described():
    assert np.array_equal(make_target("zero"), np.zeros((3, 32, 32)))
    g = make_target("gradient")
    assert g.min() == pytest.approx(0.4) and g.max() == pytest.approx(0.6)
    s = make_target("stripes")
    assert np.array_equal(s[0, 0, :4], [1, 0, 1, 0]) and np.array_equal(s[:, 5], s[:, 0])
    glyph = make_target("glyph")
    assert np.array_equal(glyph[:, :8, :8], glyph[:, 8:16, 8:16])
    for tid in TARGET_IDS:
        assert make_target(tid).shape == (3, 32, 32)
    with pytest.raises(ValueError):
        make_target("nope")
