"""Command-line entry point.

Every run resolves its configuration from built-in defaults, then an optional
``--config`` file, then explicit flags, and writes the resolved values to
``manifest.txt`` in the output directory. Feeding that manifest back through
``--config`` repeats the run.

Exit codes: 0 success, 1 runtime failure (a ``PARTIAL`` marker is left in the
output directory), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import traceback
from pathlib import Path

from . import attack as atk
from . import checkpoint as ckpt
from . import diagnostics, ldm
from . import evaluation as ev
from .config import ConfigError, parse_fraction, read_config, write_manifest
from .data import TARGET_IDS, TextureSpec, make_target, make_textures
from .imageio import ImageFormatError, load_images, load_image, save_image
from .rng import Rng

MANIFEST_NAME = "manifest.txt"
PARTIAL_MARKER = "PARTIAL"
BUILTIN_PREFIX = "builtin:"

COMMANDS = ("train", "attack", "eval", "sample", "gradcheck", "targets")

SHARED = {"checkpoint": None, "out": None, "seed": 0, "inputs": ""}
ATTACK_DEFAULTS = {
    "mode": "fused",
    "fused_weight": 1e4,
    "steps": 100,
    "alpha": "1/255",
    "epsilon": "17/255",
    "target": None,
    "batch_size": 16,
}
EVAL_DEFAULTS = {
    "scenario": "finetune",
    "transform": "none,crop_resize",
    "crop_px": ev.DEFAULT_CROP_PX,
    "samples": ev.DEFAULT_SAMPLES,
    "finetune_steps": 400,
    "finetune_lr": 1e-3,
}
DEFAULTS = {
    "train": {
        **SHARED,
        "dataset_count": 256,
        "dataset_seed": 0,
        "steps": 3000,
        "lr": 3e-3,
        "dm_steps": 3000,
        "dm_lr": 1e-3,
        "batch_size": 16,
        "timesteps": ldm.DEFAULT_T,
    },
    "attack": {**SHARED, **ATTACK_DEFAULTS},
    "eval": {**SHARED, **ATTACK_DEFAULTS, "mode": "semantic,textural,fused", "target": "builtin:stripes", **EVAL_DEFAULTS},
    "sample": {**SHARED, "samples": 16},
    "gradcheck": {**SHARED, "n_coords": 100, "n_images": 5},
    "targets": {**SHARED, **ATTACK_DEFAULTS, **EVAL_DEFAULTS, "mode": "textural", "scenario": "targets"},
}
INT_KEYS = {
    "seed", "dataset_count", "dataset_seed", "steps", "dm_steps", "batch_size", "timesteps",
    "crop_px", "samples", "finetune_steps", "n_coords", "n_images",
}
FLOAT_KEYS = {"lr", "dm_lr", "fused_weight", "finetune_lr"}
FRACTION_KEYS = {"alpha", "epsilon"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advldm", description="Adversarial perturbations against a toy latent diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def shared(p):
        p.add_argument("inputs", nargs="*", default=S, help="input PNG images")
        p.add_argument("--checkpoint", default=S, metavar="PATH")
        p.add_argument("--out", default=S, metavar="DIR")
        p.add_argument("--seed", default=S, metavar="U64")
        p.add_argument("--config", default=S, metavar="PATH")

    def attack_flags(p, modes, listed=False):
        if listed:
            # eval runs several modes; items are checked in validate()
            p.add_argument("--mode", default=S, metavar="{" + "|".join(modes) + "}[,...]")
        else:
            p.add_argument("--mode", default=S, choices=modes)
        p.add_argument("--fused-weight", default=S, metavar="FLOAT")
        p.add_argument("--steps", default=S, metavar="INT")
        p.add_argument("--alpha", default=S, metavar="FRAC")
        p.add_argument("--epsilon", default=S, metavar="FRAC")
        p.add_argument("--target", default=S, metavar="PATH", help=f"PNG path or {BUILTIN_PREFIX}<id>")
        p.add_argument("--batch-size", default=S, metavar="INT")

    def eval_flags(p, scenarios):
        p.add_argument("--scenario", default=S, choices=scenarios)
        p.add_argument("--transform", default=S, metavar="{none|crop_resize|gaussian}[,...]")
        p.add_argument("--crop-px", default=S, metavar="INT")
        p.add_argument("--samples", default=S, metavar="INT")
        p.add_argument("--finetune-steps", default=S, metavar="INT")
        p.add_argument("--finetune-lr", default=S, metavar="FLOAT")

    p = sub.add_parser("train", help="train the toy model on procedural textures")
    shared(p)
    for flag in ("--dataset-count", "--dataset-seed", "--steps", "--lr", "--dm-steps", "--dm-lr", "--batch-size", "--timesteps"):
        p.add_argument(flag, default=S)

    p = sub.add_parser("attack", help="perturb input images")
    shared(p)
    attack_flags(p, atk.MODES)

    p = sub.add_parser("eval", help="robustness grid or target comparison")
    shared(p)
    attack_flags(p, atk.MODES, listed=True)
    eval_flags(p, ("frozen", "finetune", "targets"))

    p = sub.add_parser("sample", help="generate images from the model")
    shared(p)
    p.add_argument("--samples", default=S, metavar="INT")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    shared(p)
    p.add_argument("--n-coords", default=S, metavar="INT")
    p.add_argument("--n-images", default=S, metavar="INT")

    p = sub.add_parser("targets", help="compare procedural target images")
    shared(p)
    attack_flags(p, ("textural", "fused"))
    eval_flags(p, ("targets",))
    return parser


def _convert(key: str, value):
    if key == "inputs":
        return value or ""
    if value is None or value == "":
        return None
    try:
        if key in INT_KEYS:
            return int(value)
        if key in FLOAT_KEYS:
            return float(value)
        if key in FRACTION_KEYS:
            return parse_fraction(value)
    except (ValueError, ConfigError):
        raise UsageError(f"invalid value for {key}: {value!r}") from None
    return value


def resolve(argv) -> tuple[str, dict]:
    """Parse ``argv`` into a subcommand and its fully resolved configuration."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    defaults = DEFAULTS[command]
    resolved = dict(defaults)
    config_path = ns.pop("config", None)
    if config_path is not None:
        try:
            from_file = read_config(config_path, allowed=set(defaults) | {"command"})
        except (ConfigError, OSError) as exc:
            raise UsageError(str(exc)) from None
        file_command = from_file.pop("command", command)
        if file_command != command:
            raise UsageError(f"config {config_path} is for {file_command!r}, not {command!r}")
        resolved.update(from_file)
    if "inputs" in ns:
        ns["inputs"] = os.pathsep.join(ns["inputs"]) if ns["inputs"] else resolved["inputs"]
    resolved.update(ns)
    resolved = {k: _convert(k, v) for k, v in resolved.items()}
    if resolved["seed"] is None or not 0 <= resolved["seed"] < 2**64:
        raise UsageError(f"--seed must be an unsigned 64-bit integer, got {resolved['seed']}")
    if resolved["out"] is None:
        raise UsageError("missing required flag --out")
    return command, resolved


def input_paths(resolved) -> list[Path]:
    text = resolved.get("inputs") or ""
    return [Path(p) for p in text.split(os.pathsep) if p]


def _attack_config(resolved, mode=None, target=None) -> atk.AttackConfig:
    try:
        return atk.AttackConfig(
            mode=mode or resolved["mode"],
            fused_weight=resolved["fused_weight"],
            steps=resolved["steps"],
            step_size=resolved["alpha"],
            budget=resolved["epsilon"],
            target=target,
            seed=resolved["seed"],
        )
    except ValueError as exc:
        if "requires a target" in str(exc):
            raise UsageError(f"{exc}: missing required flag --target") from None
        raise UsageError(str(exc)) from None


def _load_target(spec):
    if spec is None:
        return None
    if spec.startswith(BUILTIN_PREFIX):
        tid = spec[len(BUILTIN_PREFIX):]
        if tid not in TARGET_IDS:
            raise UsageError(f"unknown built-in target {tid!r}; expected one of {TARGET_IDS}")
        return make_target(tid)
    return load_image(spec, size=(32, 32))


def _require_checkpoint(resolved):
    if resolved["checkpoint"] is None:
        raise UsageError("missing required flag --checkpoint")
    path = Path(resolved["checkpoint"])
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def _require_inputs(resolved):
    paths = input_paths(resolved)
    if not paths:
        raise UsageError("no input images given")
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise UsageError("missing input files: " + ", ".join(missing))
    return paths


def _list_choice(value: str, allowed, what: str) -> tuple:
    items = tuple(v.strip() for v in str(value).split(",") if v.strip())
    bad = [v for v in items if v not in allowed]
    if bad or not items:
        raise UsageError(f"invalid {what}: {value!r}; expected a comma list of {allowed}")
    return items


def validate(command: str, resolved: dict) -> dict:
    """Check everything that can be checked before doing any work."""
    if command in ("attack", "eval", "targets"):
        paths = _require_inputs(resolved)
        _require_checkpoint(resolved)
        target = _load_target(resolved["target"])
        if command == "attack":
            config = _attack_config(resolved, target=target)
        else:
            modes = _list_choice(resolved["mode"], atk.MODES, "mode")
            if command == "targets" or resolved["scenario"] == "targets":
                if len(modes) != 1 or modes[0] not in ("textural", "fused"):
                    raise UsageError("target comparison needs --mode textural or --mode fused")
                # the compared targets are the procedural ones; a stand-in satisfies validation
                config = _attack_config(resolved, modes[0], make_target(TARGET_IDS[0]))
            else:
                config = _attack_config(resolved, "semantic")
                for mode in modes:
                    _attack_config(resolved, mode, target)
                config = atk.with_mode(config, "semantic", target=target)
            _list_choice(resolved["transform"], ("none", "crop_resize", "gaussian"), "transform")
            if resolved["crop_px"] < 0 or resolved["samples"] < 2:
                raise UsageError("--crop-px must be >= 0 and --samples >= 2")
        if resolved["batch_size"] < 1:
            raise UsageError("--batch-size must be positive")
        return {"paths": paths, "config": config, "target": target}
    if command == "sample":
        _require_checkpoint(resolved)
        if resolved["samples"] < 1:
            raise UsageError("--samples must be positive")
    if command == "train":
        for key in ("dataset_count", "steps", "dm_steps", "batch_size", "timesteps"):
            if resolved[key] < 1:
                raise UsageError(f"--{key.replace('_', '-')} must be positive")
    if command == "gradcheck" and resolved["checkpoint"] is not None:
        _require_checkpoint(resolved)
    return {}


# --------------------------------------------------------------------------
# commands


def run_train(resolved, out: Path, _ctx) -> int:
    schedule = ldm.make_schedule(resolved["timesteps"])
    dataset = make_textures(TextureSpec(resolved["dataset_count"], resolved["dataset_seed"]))
    rng = Rng(resolved["seed"])
    params, log = ldm.train(
        ldm.init_params(rng.fork(0)), schedule, dataset, resolved["steps"], resolved["lr"], rng.fork(1),
        dm_steps=resolved["dm_steps"], dm_lr=resolved["dm_lr"], batch_size=resolved["batch_size"],
    )
    path = Path(resolved["checkpoint"]) if resolved["checkpoint"] else out / "model.mstf"
    ckpt.save_checkpoint(params, schedule, path)
    with open(out / "train_loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["phase", "step", "loss"])
        for phase, losses in (("autoencoder", log.autoencoder), ("denoiser", log.denoiser)):
            writer.writerows([phase, i, repr(v)] for i, v in enumerate(losses))
    print(f"saved {path}")
    return 0


def _stems(paths) -> list[str]:
    return [f"{i:03d}_{p.stem}" for i, p in enumerate(paths)]


def run_attack(resolved, out: Path, ctx) -> int:
    params, schedule = ckpt.load_checkpoint(resolved["checkpoint"])
    images = load_images(ctx["paths"])
    config = ctx["config"]
    results = []
    for start in range(0, len(images), resolved["batch_size"]):
        batch = images[start : start + resolved["batch_size"]]
        results += atk.pgd_attack_batch(params, schedule, batch, config, first_index=start)
    stems = _stems(ctx["paths"])
    for stem, res in zip(stems, results):
        save_image(res.adversarial, out / f"adv_{stem}.png")
    ckpt.write_tensors(out / "delta.mstf", {f"delta/{s}": r.delta for s, r in zip(stems, results)})
    with open(out / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "step", "semantic", "textural", "objective", "linf"])
        for stem, res in zip(stems, results):
            for step, (row, audit) in enumerate(zip(res.loss_trace, res.audit)):
                writer.writerow([stem, step, *(repr(float(v)) for v in row), repr(float(audit[0]))])
    for stem, res in zip(stems, results):
        print(f"{stem}: linf={res.linf:.6f} objective {res.loss_trace[0, 2]:.6g} -> {res.loss_trace[-1, 2]:.6g}")
    return 0


def _eval_common(resolved, ctx):
    params, schedule = ckpt.load_checkpoint(resolved["checkpoint"])
    images = load_images(ctx["paths"])
    kw = {"steps": resolved["finetune_steps"], "lr": resolved["finetune_lr"]}
    return params, schedule, images, kw


def _run_target_table(resolved, out: Path, ctx) -> int:
    params, schedule, images, kw = _eval_common(resolved, ctx)
    for tid in TARGET_IDS:
        save_image(make_target(tid), out / f"target_{tid}.png")
    reports = ev.target_comparison(
        params, schedule, images, ctx["config"],
        transforms=_list_choice(resolved["transform"], ("none", "crop_resize", "gaussian"), "transform"),
        crop_px=resolved["crop_px"], n_samples=resolved["samples"], seed=resolved["seed"], **kw,
    )
    ev.reports_to_csv(reports, out / "report.csv")
    print(ev.target_table_csv(reports, out / "targets.csv"), end="")
    return 0


def run_eval(resolved, out: Path, ctx) -> int:
    if resolved["scenario"] == "targets":
        return _run_target_table(resolved, out, ctx)
    params, schedule, images, kw = _eval_common(resolved, ctx)
    if resolved["scenario"] == "frozen":
        kw = {}
    reports = ev.robustness_grid(
        params, schedule, images, ctx["config"], scenario=resolved["scenario"],
        modes=_list_choice(resolved["mode"], atk.MODES, "mode"),
        transforms=_list_choice(resolved["transform"], ("none", "crop_resize", "gaussian"), "transform"),
        crop_px=resolved["crop_px"], n_samples=resolved["samples"], seed=resolved["seed"], **kw,
    )
    print(ev.reports_to_csv(reports, out / "report.csv"), end="")
    return 0


def run_targets(resolved, out: Path, ctx) -> int:
    return _run_target_table(resolved, out, ctx)


def run_sample(resolved, out: Path, _ctx) -> int:
    params, schedule = ckpt.load_checkpoint(resolved["checkpoint"])
    images = ldm.sample(params, schedule, resolved["samples"], Rng(resolved["seed"], stream=0x5A))
    for i, img in enumerate(images):
        save_image(img, out / f"sample_{i:03d}.png")
    print(f"wrote {len(images)} samples")
    return 0


def run_gradcheck(resolved, out: Path, _ctx) -> int:
    if resolved["checkpoint"] is not None:
        params, schedule = ckpt.load_checkpoint(resolved["checkpoint"])
    else:
        params, schedule = ldm.init_params(Rng(resolved["seed"])), ldm.make_schedule()
    rows = diagnostics.gradcheck_suite(
        params, schedule, resolved["seed"], resolved["n_coords"], resolved["n_images"]
    )
    with open(out / "gradcheck.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["check", "rel_error", "n_coords", "passed"])
        for r in rows:
            writer.writerow([r.name, f"{r.rel_error:.3e}", r.n_coords, int(r.passed)])
    failed = [r for r in rows if not r.passed]
    for r in rows:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:24s} {r.rel_error:.2e}")
    return 1 if failed else 0


RUNNERS = {
    "train": run_train,
    "attack": run_attack,
    "eval": run_eval,
    "sample": run_sample,
    "gradcheck": run_gradcheck,
    "targets": run_targets,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, resolved = resolve(argv)
        ctx = validate(command, resolved)
    except (UsageError, ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = Path(resolved["out"])
    marker = out / PARTIAL_MARKER
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / MANIFEST_NAME, {"command": command, **resolved})
        marker.write_text("run started; outputs incomplete\n", encoding="utf-8")
        code = RUNNERS[command](resolved, out, ctx)
    except Exception as exc:  # noqa: BLE001 - any stage failure is reported the same way
        try:
            marker.write_text(f"run failed: {exc}\n\n{traceback.format_exc()}", encoding="utf-8")
        except OSError:
            pass
        print(f"error: {exc}", file=sys.stderr)
        return 1
    marker.unlink(missing_ok=True)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
