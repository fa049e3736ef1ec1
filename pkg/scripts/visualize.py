"""Train MICRO-32 briefly on the quadrant task, then write clustering maps for a
few held-out images (with and without region partitioning)."""
import argparse
import logging
import os

from contextcluster.model import build_model, load_checkpoint, preset, save_checkpoint
from contextcluster.training import TrainConfig, synthetic_quadrant_dataset, train
from contextcluster.viz import capture_cluster_maps, write_cluster_maps, write_image

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="runs/maps")
ap.add_argument("--checkpoint")
ap.add_argument("--images", type=int, default=3)
ap.add_argument("--seed", type=int, default=7)
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = preset("micro32", num_classes=4)
if args.checkpoint:
    model = load_checkpoint(args.checkpoint, cfg)
else:
    model = build_model(cfg, seed=args.seed)
    train(model, synthetic_quadrant_dataset(4000, 32, args.seed),
          TrainConfig(epochs=20, seed=args.seed, stop_at_train_acc=0.95))
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, "model.coc"))

whole = load_checkpoint(os.path.join(args.out, "model.coc") if not args.checkpoint else args.checkpoint,
                        preset("micro32", num_classes=4, no_partition=True))
held = synthetic_quadrant_dataset(args.images, 32, args.seed + 1000)
for i, img in enumerate(held.images):
    d = os.path.join(args.out, f"img{i}")
    os.makedirs(d, exist_ok=True)
    write_image(img, os.path.join(d, "input.ppm"))
    write_cluster_maps(capture_cluster_maps(model, img), os.path.join(d, "regions"), (32, 32), overlay=img)
    write_cluster_maps(capture_cluster_maps(whole, img), os.path.join(d, "whole"), (32, 32), overlay=img)
    print(d)
