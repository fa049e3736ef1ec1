"""Train MICRO-32 on the synthetic quadrant task, with or without positions."""
import argparse
import logging

from contextcluster.model import build_model, preset
from contextcluster.training import TrainConfig, synthetic_quadrant_dataset, train

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=4000)
ap.add_argument("--epochs", type=int, default=20)
ap.add_argument("--seed", type=int, default=7)
ap.add_argument("--no-position", action="store_true")
ap.add_argument("--out", default=None)
args = ap.parse_args()

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
data = synthetic_quadrant_dataset(args.n, 32, args.seed)
held = synthetic_quadrant_dataset(1000, 32, args.seed + 1000)
model = build_model(preset("micro32", num_classes=4, no_position=args.no_position), seed=args.seed)
log = train(model, data, TrainConfig(epochs=args.epochs, seed=args.seed), eval_data=held, out_dir=args.out)
print(log.last("train"), log.last("test"))
