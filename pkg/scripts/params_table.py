"""Parameter and MAC counts for the ImageNet-sized presets, split by component."""
from contextcluster.model import build_model, count_macs, preset

REFERENCE = {"tiny": 5.3, "small": 14.0, "medium": 27.9}

for name in ("tiny", "tiny_dagger", "small", "medium"):
    model = build_model(preset(name))
    groups = {}
    for pname, p in model.named_parameters():
        key = "head" if pname.startswith("head") else (
            "reducers" if ".reducer." in pname else
            "cluster" if ".cluster." in pname else
            "mlp" if ".mlp_" in pname else "norms")
        groups[key] = groups.get(key, 0) + p.size
    total = sum(groups.values())
    macs = count_macs(model, by_category=True)
    ref = REFERENCE.get(name)
    line = f"{name:12s} {total / 1e6:7.3f}M"
    if ref:
        line += f" (ref {ref}M, {total / 1e6 / ref - 1:+.1%})"
    print(line)
    for k, v in sorted(groups.items()):
        print(f"    {k:9s} {v / 1e6:7.3f}M")
    print(f"    MACs {sum(macs.values()) / 1e9:.3f}G  " +
          "  ".join(f"{k}={v / 1e9:.3f}G" for k, v in sorted(macs.items())))
