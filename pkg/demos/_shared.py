"""Model loading used by every demo: reuse a checkpoint or train one on the spot."""

import argparse
import time
from pathlib import Path

from advldm.checkpoint import load_checkpoint, save_checkpoint
from advldm.data import TextureSpec, make_textures
from advldm.ldm import init_params, make_schedule, train
from advldm.rng import Rng

DEFAULT_CHECKPOINT = Path(__file__).with_name("model.mstf")


def demo_parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--checkpoint", type=Path, default=DEFAULT_CHECKPOINT)
    p.add_argument("--quick", action="store_true", help="train 300+300 steps instead of 3000+3000 if no checkpoint exists")
    return p


def load_or_train(path: Path, quick: bool = False):
    if path.exists():
        print(f"loading {path}")
        return load_checkpoint(path)
    steps = 300 if quick else 3000
    print(f"no checkpoint at {path}; training {steps}+{steps} steps on 256 textures")
    rng = Rng(0)
    start = time.perf_counter()
    params, log = train(init_params(rng.fork(0)), make_schedule(), make_textures(TextureSpec()), steps=steps,
                        rng=rng.fork(1), dm_steps=steps)
    print(f"  done in {time.perf_counter() - start:.0f}s; final losses: "
          f"autoencoder {log.autoencoder[-1]:.4f}, denoiser {log.denoiser[-1]:.4f}")
    schedule = make_schedule()
    save_checkpoint(params, schedule, path)
    return params, schedule
