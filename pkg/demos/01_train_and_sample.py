"""Train the toy latent diffusion model and look at what it learned.

The model is small enough to train on one core in a few minutes. After
training we check three things a later attack relies on: the autoencoder
reconstructs textures, the denoiser's loss depends on the timestep, and
samples from the reverse process resemble the training textures more than
samples from an untrained model do.

    python demos/01_train_and_sample.py [--quick]
"""

import numpy as np

from advldm import evaluation as ev
from advldm import ldm
from advldm.data import TextureSpec, make_textures
from advldm.imageio import save_image
from advldm.rng import Rng

from _shared import demo_parser, load_or_train

args = demo_parser(__doc__.splitlines()[0]).parse_args()
params, schedule = load_or_train(args.checkpoint, args.quick)

held_out = make_textures(TextureSpec(count=64, seed=99)).images
recon = ldm.decode(params, ldm.encode(params, held_out))
print(f"\nreconstruction MAE on 64 held-out textures: {np.abs(recon - held_out).mean():.4f}")

# the noise-prediction loss should be much larger near t=1 than near t=T
z = ldm.encode(params, held_out[:16])
eps = Rng(1).normal(z.shape)
for t in (1, 10, 50, 100):
    loss = ldm.dm_loss(params, schedule, held_out[:16], np.full(16, t), eps)
    print(f"  dm_loss at t={t:3d}: {np.mean(loss):.4f}")

samples = ldm.sample(params, schedule, 50, Rng(2))
untrained = ldm.sample(ldm.init_params(Rng(123)), schedule, 50, Rng(2))
ref = ev.feature_extract(params, held_out)
print("\nFrechet proxy against held-out textures (lower is closer):")
print(f"  trained samples   {ev.frechet_proxy(ev.feature_extract(params, samples), ref):.2f}")
print(f"  untrained samples {ev.frechet_proxy(ev.feature_extract(params, untrained), ref):.2f}")

sheet = np.concatenate([np.concatenate(list(samples[r * 8:(r + 1) * 8]), axis=2) for r in range(4)], axis=1)
save_image(sheet, "demo_samples.png")
print("\nwrote demo_samples.png (4 x 8 samples)")
