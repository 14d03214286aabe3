"""How much does the choice of target image matter in textural mode?

Four procedural targets are compared: an all-black image, a faint gradient,
high-contrast stripes and a tiled glyph. For each we report how far the
attack moved the encoder latent and what fine-tuning on the attacked set
does to generation quality. Intuition says the black image should be the
weakest target since it carries no texture; the first column bears that
out, the Frechet column on this toy feature space often does not (see
README, "Known limitations").

    python demos/04_target_choice.py [--quick] [--images 32]
"""

from advldm import attack as atk
from advldm import evaluation as ev
from advldm.data import TARGET_LABELS, TextureSpec, make_target, make_textures

from _shared import demo_parser, load_or_train

parser = demo_parser(__doc__.splitlines()[0])
parser.add_argument("--images", type=int, default=32)
args = parser.parse_args()
params, schedule = load_or_train(args.checkpoint, args.quick)

images = make_textures(TextureSpec(count=args.images, seed=2000)).images
cfg = atk.AttackConfig(mode="textural", target=make_target("zero"))
reports = ev.target_comparison(params, schedule, images, cfg)

print(f"\n{'target':12s} {'displacement':>13s} {'Frechet':>9s} {'Frechet crop':>13s} {'prec':>6s} {'prec crop':>10s}")
for row in ev.target_table_rows(reports):
    print(f"{row['label']:12s} {float(row['mean_latent_distance']):13.3f} {float(row['frechet_none']):9.3f} "
          f"{float(row['frechet_crop_resize']):13.3f} {float(row['precision_none']):6.3f} "
          f"{float(row['precision_crop_resize']):10.3f}")
