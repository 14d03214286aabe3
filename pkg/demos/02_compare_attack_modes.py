"""Attack a handful of textures in each mode and compare what each one does.

Semantic mode pushes the image where the denoiser predicts noise badly.
Textural mode drags the encoder latent towards a target image. Fused mode
adds the two with the semantic term weighted by 1e4. All three stay inside
the same 17/255 L-infinity budget, so the PSNR column is similar; what
differs is which quantity moves.

    python demos/02_compare_attack_modes.py [--quick]
"""

import numpy as np

from advldm import attack as atk
from advldm import evaluation as ev
from advldm.data import TextureSpec, make_target, make_textures
from advldm.imageio import save_image

from _shared import demo_parser, load_or_train

args = demo_parser(__doc__.splitlines()[0]).parse_args()
params, schedule = load_or_train(args.checkpoint, args.quick)

images = make_textures(TextureSpec(count=8, seed=500)).images
target = make_target("stripes")
targets = np.repeat(target[None], len(images), axis=0)
base = atk.AttackConfig(target=target)

clean_loss = ev.mean_dm_loss(params, schedule, images, n_draws=200).mean()
clean_dist = ev.latent_distance(params, images, targets).mean()
print(f"\n{'condition':10s} {'dm_loss':>9s} {'dist to target':>15s} {'PSNR dB':>8s} {'max |delta|':>12s}")
print(f"{'clean':10s} {clean_loss:9.4f} {clean_dist:15.3f} {'-':>8s} {'-':>12s}")

rows = [images]
for mode in atk.MODES:
    adv = atk.attack_images(params, schedule, images, atk.with_mode(base, mode))
    rows.append(adv)
    print(f"{mode:10s} {ev.mean_dm_loss(params, schedule, adv, n_draws=200).mean():9.4f} "
          f"{ev.latent_distance(params, adv, targets).mean():15.3f} {ev.psnr(adv, images).mean():8.2f} "
          f"{np.abs(adv - images).max() * 255:9.2f}/255")

# rows: clean, semantic, textural, fused; perturbations amplified x4 underneath
grid = np.concatenate([np.concatenate(list(r), axis=2) for r in rows], axis=1)
amplified = np.concatenate([np.concatenate(list(np.clip(0.5 + 4 * (r - images), 0, 1)), axis=2) for r in rows[1:]], axis=1)
save_image(np.concatenate([grid, amplified], axis=1), "demo_modes.png")
print("\nwrote demo_modes.png (clean / semantic / textural / fused, then the three perturbations x4)")

# how the fused gradient leans between its two parts as the weight grows
x, t = images[0], 50
eps = np.random.default_rng(0).standard_normal((4, 8, 8))
print("\nfused gradient direction vs the pure-mode gradients at one (t, eps):")
for row in atk.gradient_direction_probe(params, schedule, x, target, [0, 1, 1e2, 1e4, 1e8], t, eps):
    print(f"  w={row.weight:<8g} cos(semantic)={row.cos_semantic:+.4f} cos(textural)={row.cos_textural:+.4f}")
