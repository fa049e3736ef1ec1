"""Similarity cost and wall-clock of one cluster op as the region count grows
(total centers fixed). Prints a table; --json writes the raw report."""
import argparse
import json

from contextcluster.cli import bench_regions

ap = argparse.ArgumentParser()
ap.add_argument("--grid", type=int, default=32)
ap.add_argument("--centers", type=int, default=64)
ap.add_argument("--regions", type=int, nargs="+", default=[1, 4, 16, 64])
ap.add_argument("--repeats", type=int, default=5)
ap.add_argument("--json")
args = ap.parse_args()

rep = bench_regions(args.grid, total_centers=args.centers, regions=tuple(args.regions),
                    repeats=args.repeats)
base = rep["results"][0]
print(f"{'regions':>8} {'centers/region':>15} {'sim MACs':>12} {'ratio':>7} {'total MACs':>12} {'ms':>8}")
for r in rep["results"]:
    print(f"{r['regions']:>8} {r['local_centers']:>15} {r['similarity_macs']:>12} "
          f"{base['similarity_macs'] / r['similarity_macs']:>7.1f} {r['total_macs']:>12} "
          f"{1e3 * r['seconds']:>8.2f}")
if args.json:
    with open(args.json, "w") as f:
        json.dump(rep, f, indent=2)
