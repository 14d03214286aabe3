import csv

import numpy as np
import pytest

from advldm import checkpoint as ckpt
from advldm import evaluation as ev
from advldm.cli import MANIFEST_NAME, PARTIAL_MARKER, main, resolve
from advldm.config import read_config
from advldm.data import TextureSpec, make_textures
from advldm.imageio import load_image, save_image

EPS = 17 / 255


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main([
        "train", "--out", str(root / "model"), "--steps", "3", "--dm-steps", "3",
        "--dataset-count", "8", "--batch-size", "4",
    ])
    assert code == 0
    paths = []
    for i, img in enumerate(make_textures(TextureSpec(count=4, seed=8)).images):
        paths.append(root / f"img{i}.png")
        save_image(img, paths[-1])
    return root, root / "model" / "model.mstf", [str(p) for p in paths]


def test_default_budgets_parse():
    cmd, cfg = resolve(["attack", "--mode", "fused", "--fused-weight", "1e4", "--steps", "100",
                        "--alpha", "1/255", "--epsilon", "17/255", "--out", "o"])
    assert cmd == "attack"
    assert (cfg["mode"], cfg["fused_weight"], cfg["steps"], cfg["alpha"], cfg["epsilon"]) == (
        "fused", 1e4, 100, 1 / 255, 17 / 255)
    _, bare = resolve(["attack", "--out", "o"])
    assert (bare["fused_weight"], bare["steps"], bare["alpha"], bare["epsilon"]) == (1e4, 100, 1 / 255, 17 / 255)


def test_usage_errors_exit_2(workspace, tmp_path, capsys):
    root, model, paths = workspace
    base = ["attack", *paths[:1], "--checkpoint", str(model), "--out", str(tmp_path / "o")]
    assert main(base + ["--mode", "textural"]) == 2
    assert "--target" in capsys.readouterr().err
    assert main(base + ["--mode", "semantic", "--epsilon", "0"]) == 2
    assert main(base + ["--bogus-flag", "1"]) == 2
    assert main(base + ["--mode", "wrong"]) == 2
    assert main(base + ["--steps", "ten"]) == 2
    assert main(["attack", "missing.png", "--checkpoint", str(model), "--out", str(tmp_path / "o")]) == 2
    assert main(["attack", *paths[:1], "--out", str(tmp_path / "o")]) == 2
    assert main(["sample", "--checkpoint", str(model)]) == 2
    assert not (tmp_path / "o").exists()


def test_eval_takes_comma_lists(workspace, tmp_path):
    root, model, paths = workspace
    _, cfg = resolve(["eval", "--out", "o", "--mode", "semantic,fused", "--transform", "crop_resize"])
    assert (cfg["mode"], cfg["transform"]) == ("semantic,fused", "crop_resize")
    base = ["eval", *paths, "--checkpoint", str(model), "--out", str(tmp_path / "o")]
    assert main(base + ["--mode", "semantic,bogus"]) == 2
    assert main(base + ["--transform", "none,blur"]) == 2
    assert not (tmp_path / "o").exists()


def test_attack_outputs_and_reproducibility(workspace, tmp_path):
    root, model, paths = workspace
    before = [open(p, "rb").read() for p in paths]
    out = tmp_path / "a"
    args = ["attack", *paths[:2], "--checkpoint", str(model), "--out", str(out),
            "--mode", "fused", "--target", "builtin:stripes", "--steps", "6", "--seed", "3"]
    assert main(args) == 0
    assert [open(p, "rb").read() for p in paths] == before
    names = sorted(p.name for p in out.iterdir())
    assert names == ["adv_000_img0.png", "adv_001_img1.png", "delta.mstf", "loss_trace.csv", MANIFEST_NAME]

    deltas = ckpt.read_tensors(out / "delta.mstf")
    for stem, src in zip(("000_img0", "001_img1"), paths):
        delta = deltas[f"delta/{stem}"]
        assert np.abs(delta).max() <= EPS + 1e-12
        x = load_image(src)
        adv = load_image(out / f"adv_{stem}.png")
        assert np.abs(adv - x).max() <= EPS + 1 / 510 + 1e-12
        assert adv.min() >= 0.0 and adv.max() <= 1.0
    with open(out / "loss_trace.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12 and list(rows[0]) == ["image", "step", "semantic", "textural", "objective", "linf"]

    manifest = read_config(out / MANIFEST_NAME)
    assert manifest["command"] == "attack" and float(manifest["epsilon"]) == EPS
    again = tmp_path / "b"
    assert main(["attack", "--config", str(out / MANIFEST_NAME), "--out", str(again)]) == 0
    for name in names:
        if name != MANIFEST_NAME:
            assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_single_step_trace(workspace, tmp_path):
    root, model, paths = workspace
    out = tmp_path / "s"
    assert main(["attack", paths[0], "--checkpoint", str(model), "--out", str(out),
                 "--mode", "semantic", "--steps", "1"]) == 0
    with open(out / "loss_trace.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 1


def test_config_file_overridden_by_flags(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("steps = 7\nmode = semantic\n", encoding="utf-8")
    _, resolved = resolve(["attack", "--config", str(cfg), "--steps", "9", "--out", "o"])
    assert resolved["steps"] == 9 and resolved["mode"] == "semantic"
    cfg.write_text("unknown_key = 1\n", encoding="utf-8")
    assert main(["attack", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_runtime_failure_leaves_marker(workspace, tmp_path):
    root, model, paths = workspace
    bad = tmp_path / "bad.mstf"
    bad.write_bytes(model.read_bytes()[:100])
    out = tmp_path / "f"
    assert main(["attack", paths[0], "--checkpoint", str(bad), "--out", str(out), "--mode", "semantic"]) == 1
    assert (out / PARTIAL_MARKER).exists() and (out / MANIFEST_NAME).exists()
    assert "truncated" in (out / PARTIAL_MARKER).read_text()


def test_eval_grid_matches_library(workspace, tmp_path):
    root, model, paths = workspace
    out = tmp_path / "e"
    flags = ["--steps", "2", "--samples", "5", "--finetune-steps", "2", "--seed", "4"]
    assert main(["eval", *paths, "--checkpoint", str(model), "--out", str(out), *flags]) == 0
    rows = ev.read_csv(out / "report.csv")
    assert len(rows) == 10
    assert {r["mode"] for r in rows} == {"none", "gaussian", "semantic", "textural", "fused"}
    assert {r["transform"] for r in rows} == {"none", "crop_resize"}

    from advldm import attack as atk
    from advldm.data import make_target
    from advldm.imageio import load_images

    params, schedule = ckpt.load_checkpoint(model)
    cfg = atk.AttackConfig(mode="semantic", steps=2, seed=4, target=make_target("stripes"))
    direct = ev.robustness_grid(params, schedule, load_images(paths), cfg, n_samples=5, seed=4, steps=2, lr=1e-3)
    assert (out / "report.csv").read_text() == ev.reports_to_csv(direct)


def test_eval_frozen_and_single_transform(workspace, tmp_path):
    root, model, paths = workspace
    out = tmp_path / "fz"
    assert main(["eval", *paths[:3], "--checkpoint", str(model), "--out", str(out), "--scenario", "frozen",
                 "--mode", "semantic", "--transform", "crop_resize", "--steps", "2"]) == 0
    rows = ev.read_csv(out / "report.csv")
    assert [r["mode"] for r in rows] == ["none", "gaussian", "semantic"]
    assert all(r["scenario"] == "frozen" and r["transform"] == "crop_resize" for r in rows)


def test_targets_command(workspace, tmp_path):
    root, model, paths = workspace
    out = tmp_path / "t"
    assert main(["targets", *paths, "--checkpoint", str(model), "--out", str(out),
                 "--steps", "2", "--samples", "5", "--finetune-steps", "2"]) == 0
    with open(out / "targets.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert [r["label"] for r in table] == ["No Attack", "Zero_Target", "Target1", "Target2", "Target_Logo"]
    assert np.array_equal(load_image(out / "target_zero.png"), np.zeros((3, 32, 32)))
    from advldm.data import TARGET_IDS, make_target

    for tid in TARGET_IDS:
        assert np.abs(load_image(out / f"target_{tid}.png") - make_target(tid)).max() <= 1 / 510
    assert main(["targets", *paths, "--checkpoint", str(model), "--out", str(out), "--mode", "semantic"]) == 2


def test_sample_and_gradcheck(workspace, tmp_path):
    root, model, paths = workspace
    out = tmp_path / "smp"
    assert main(["sample", "--checkpoint", str(model), "--out", str(out), "--samples", "3"]) == 0
    assert sorted(p.name for p in out.glob("*.png")) == ["sample_000.png", "sample_001.png", "sample_002.png"]
    out = tmp_path / "gc"
    assert main(["gradcheck", "--checkpoint", str(model), "--out", str(out), "--n-coords", "10", "--n-images", "1"]) == 0
    with open(out / "gradcheck.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["passed"] == "1" for r in rows)
    assert {"semantic_loss[0]", "textural_loss[0]", "fused_loss[0]", "conv3x3_s2_input"} <= {r["check"] for r in rows}


def test_train_outputs(workspace):
    root, model, _ = workspace
    assert model.exists()
    with open(root / "model" / "train_loss.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["phase"] for r in rows] == ["autoencoder"] * 3 + ["denoiser"] * 3
    assert read_config(root / "model" / MANIFEST_NAME)["command"] == "train"
