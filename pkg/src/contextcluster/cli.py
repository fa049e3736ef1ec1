"""``coc`` command line: train, eval, viz, gradcheck, params, bench.

JSON results go to stdout, human-readable logs to stderr.
Exit codes: 0 success, 2 usage, 3 data/checkpoint, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import gradcheck, tensor as T
from .cluster import ContextCluster
from .model import (
    CheckpointError, build_model, count_macs, count_parameters, load_checkpoint, preset,
    read_config, write_config,
)
from .points import ConfigError, FormatError, GridMeta
from .training import (
    NumericalAbort, TrainConfig, evaluate, load_cifar10, synthetic_noise_dataset,
    synthetic_quadrant_dataset, train,
)
from .viz import capture_cluster_maps, read_ppm, write_cluster_maps

log = logging.getLogger("coc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATIONS = ("no-position", "no-cluster-op", "single-head", "no-partition")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunSpec:
    subcommand: str
    preset: str | None = None
    config: str | None = None
    data: str | None = None
    seed: int = 0
    out: str | None = None
    ablations: tuple = ()
    threads: int = 1
    extra: dict = field(default_factory=dict)

    def model_config(self, **overrides):
        if self.config:
            if not os.path.isfile(self.config):
                raise UsageError(f"config file not found: {self.config}")
            cfg = read_config(self.config, base=self.preset)
        else:
            cfg = preset(self.preset or "micro32")
        flags = {a.replace("-", "_"): True for a in self.ablations}
        return replace(cfg, **flags, **overrides)


def _spec(args):
    return RunSpec(
        subcommand=args.cmd, preset=getattr(args, "preset", None),
        config=getattr(args, "config", None), data=getattr(args, "data", None),
        seed=args.seed, out=getattr(args, "out", None),
        ablations=tuple(getattr(args, "ablate", None) or ()), threads=args.threads,
    )


def _parse_opts(text):
    opts = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise UsageError(f"bad data option {part!r}; expected key=value")
        k, v = part.split("=", 1)
        opts[k.strip()] = v.strip()
    return opts


def load_data(source, seed, image_size=32):
    """Resolve a data source into ``(train, test)`` datasets.

    ``synthetic:quadrant[:n=..,size=..]``, ``synthetic:noise[:n=..,classes=..]``,
    ``cifar10[:DIR]`` or a directory holding CIFAR-10 binary batches. Without a
    source, ``$COC_DATA_DIR`` is used as a CIFAR-10 root.
    """
    source = source or os.environ.get("COC_DATA_DIR")
    if not source:
        raise UsageError("no data source: pass --data or set COC_DATA_DIR")
    if source.startswith("synthetic:"):
        kind, _, rest = source[len("synthetic:"):].partition(":")
        opts = _parse_opts(rest)
        n = int(opts.get("n", 4000))
        size = int(opts.get("size", image_size))
        n_test = int(opts.get("test", max(1, n // 4)))
        if kind == "quadrant":
            return (synthetic_quadrant_dataset(n, size, seed),
                    synthetic_quadrant_dataset(n_test, size, seed + 1000))
        if kind == "noise":
            k = int(opts.get("classes", 10))
            return (synthetic_noise_dataset(n, size, k, seed),
                    synthetic_noise_dataset(n_test, size, k, seed + 1000))
        raise UsageError(f"unknown synthetic dataset {kind!r}")
    root = source.split(":", 1)[1] if source.startswith("cifar10") else source
    root = root or os.environ.get("COC_DATA_DIR", "")
    if not os.path.isdir(root):
        raise UsageError(f"data path not found: {root!r}")
    try:
        return load_cifar10(root)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(n)


# -- subcommands ---------------------------------------------------------------

def cmd_train(args):
    spec = _spec(args)
    train_set, test_set = load_data(spec.data, spec.seed)
    if args.subset:
        train_set = train_set.subset(args.subset, seed=spec.seed)
    cfg = spec.model_config(num_classes=train_set.num_classes,
                            input_size=tuple(train_set.images.shape[1:3]))
    model = build_model(cfg, seed=spec.seed)
    out = spec.out or "runs/train"
    os.makedirs(out, exist_ok=True)
    write_config(cfg, os.path.join(out, "config.txt"))
    header = {
        "preset": spec.preset or "-", "config": spec.config or "-", "data": spec.data,
        "seed": spec.seed, "ablations": ",".join(spec.ablations) or "none",
        "params": count_parameters(model),
    }
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                       weight_decay=args.weight_decay, warmup_epochs=args.warmup,
                       seed=spec.seed, checkpoint_every=args.checkpoint_every)
    try:
        tlog = train(model, train_set, tcfg, eval_data=test_set, out_dir=out, header=header)
    except NumericalAbort as exc:
        log.error("%s", exc)
        _emit({"status": "numerical_abort", "error": str(exc)})
        return EXIT_NUMERIC
    _emit({
        "status": "ok", "out": out, "checkpoint": os.path.join(out, "final.coc"),
        "train": tlog.last("train"), "test": tlog.last("test"), "header": header,
    })
    return EXIT_OK


def cmd_eval(args):
    spec = _spec(args)
    _, test_set = load_data(spec.data, spec.seed)
    cfg = spec.model_config(num_classes=test_set.num_classes,
                            input_size=tuple(test_set.images.shape[1:3]))
    if args.checkpoint:
        if not os.path.isfile(args.checkpoint):
            raise DataError(f"checkpoint not found: {args.checkpoint}")
        model = load_checkpoint(args.checkpoint, cfg)
    else:
        model = build_model(cfg, seed=spec.seed)
    loss, acc = evaluate(model, test_set)
    _emit({"accuracy": acc, "loss": loss, "n": len(test_set),
           "checkpoint": args.checkpoint, "seed": spec.seed})
    return EXIT_OK


def cmd_gradcheck(args):
    names = args.ops or None
    unknown = set(names or ()) - set(gradcheck.CHECKS)
    if unknown:
        raise UsageError(f"unknown ops: {sorted(unknown)}")
    results = gradcheck.run(names, seed=args.seed)
    ok = all(v < args.tol for v in results.values())
    for name, err in results.items():
        log.info("%-28s %.3e %s", name, err, "ok" if err < args.tol else "FAIL")
    _emit({"tolerance": args.tol, "max_rel_error": results, "passed": ok})
    return EXIT_OK if ok else 1


def cmd_params(args):
    rows = []
    for name in args.preset or ["tiny", "small", "medium"]:
        spec = replace(_spec(args), preset=name)
        model = build_model(spec.model_config(), seed=spec.seed)
        row = {"preset": name, "params": count_parameters(model)}
        if not args.no_macs:
            row["macs"] = count_macs(model)
        rows.append(row)
        log.info("%-12s %8.2fM params %s", name, row["params"] / 1e6,
                 f"{row['macs'] / 1e9:.3f} GMACs" if "macs" in row else "")
    _emit(rows)
    return EXIT_OK


def _load_image(path, size):
    if path is None:
        return synthetic_quadrant_dataset(1, size[0], seed=0).images[0]
    if not os.path.isfile(path):
        raise DataError(f"image not found: {path}")
    if path.endswith(".npy"):
        img = np.load(path).astype(np.float32)
    else:
        img = read_ppm(path).astype(np.float32) / 255.0
    if img.shape[:2] != tuple(size):
        raise DataError(f"image is {img.shape[:2]}, model expects {tuple(size)}")
    return img


def cmd_viz(args):
    spec = _spec(args)
    if not os.path.isfile(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    over = {"no_partition": True} if args.no_partition else {}
    if args.num_classes:
        over["num_classes"] = args.num_classes
    cfg = spec.model_config(**over)
    model = load_checkpoint(args.checkpoint, cfg)
    img = _load_image(args.image, cfg.input_size)
    maps = capture_cluster_maps(model, img)
    out = spec.out or "runs/viz"
    paths = write_cluster_maps(maps, out, cfg.input_size, args.palette_seed,
                               overlay=img if args.overlay else None)
    _emit({"files": paths, "count": len(paths)})
    return EXIT_OK


def bench_regions(grid_side=32, dim=64, heads=2, head_dim=16, total_centers=64,
                  regions=(1, 4, 16, 64), seed=0, repeats=3):
    """Time one context cluster op at several region counts with the total
    number of centers held fixed, and count its similarity MACs."""
    rng = np.random.default_rng(seed)
    op = ContextCluster(dim, heads, head_dim, rng)
    grid = GridMeta(grid_side, grid_side)
    x = T.Tensor(rng.standard_normal((1, grid.n, dim)).astype(np.float32))
    results = []
    for r in regions:
        c = total_centers // r
        with T.no_grad(), T.mac_counter() as macs:
            op(x, grid, regions=r, local_centers=c)
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            with T.no_grad():
                op(x, grid, regions=r, local_centers=c)
            best = min(best, time.perf_counter() - t0)
        results.append({
            "regions": r, "local_centers": c, "similarity_macs": macs.get("similarity", 0),
            "total_macs": int(sum(macs.values())), "seconds": best,
        })
    return {"grid": [grid_side, grid_side], "dim": dim, "heads": heads, "head_dim": head_dim,
            "total_centers": total_centers, "results": results}


def cmd_bench(args):
    report = bench_regions(args.grid, args.dim, args.heads, args.head_dim, args.centers,
                           tuple(args.regions), args.seed)
    base = report["results"][0]["similarity_macs"]
    for row in report["results"]:
        log.info("regions=%3d sim MACs=%10d (x1/%g) %.4fs", row["regions"],
                 row["similarity_macs"], base / max(row["similarity_macs"], 1), row["seconds"])
    _emit(report)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="coc", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--preset", help="tiny, tiny_dagger, small, medium, micro32")
    model_opts.add_argument("--config", help="key = value file; overrides the preset field by field")
    model_opts.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])

    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", parents=[common, model_opts])
    t.add_argument("--data")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.05)
    t.add_argument("--warmup", type=float, default=2)
    t.add_argument("--subset", type=int, default=0)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common, model_opts])
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", parents=[common, model_opts])
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", help="P6 .ppm or .npy in [0, 1]; default: a quadrant sample")
    v.add_argument("--num-classes", type=int)
    v.add_argument("--no-partition", action="store_true")
    v.add_argument("--palette-seed", type=int, default=0)
    v.add_argument("--overlay", action="store_true")
    v.add_argument("--out")
    v.set_defaults(func=cmd_viz)

    g = sub.add_parser("gradcheck", parents=[common])
    g.add_argument("--ops", nargs="*")
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    pa = sub.add_parser("params", parents=[common])
    pa.add_argument("--preset", action="append")
    pa.add_argument("--config")
    pa.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    pa.add_argument("--no-macs", action="store_true")
    pa.set_defaults(func=cmd_params)

    b = sub.add_parser("bench", parents=[common])
    b.add_argument("--grid", type=int, default=32)
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--heads", type=int, default=2)
    b.add_argument("--head-dim", type=int, default=16)
    b.add_argument("--centers", type=int, default=64)
    b.add_argument("--regions", type=int, nargs="+", default=[1, 4, 16, 64])
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except (UsageError, ConfigError, KeyError) as exc:
        print(f"coc {args.cmd}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, CheckpointError) as exc:
        print(f"coc {args.cmd}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, T.NumericalError) as exc:
        print(f"coc {args.cmd}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
