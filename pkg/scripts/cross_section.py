"""Print the mean loss-along-gradient curves stored in a zoo bundle.

    python scripts/cross_section.py runs/zoo/seed0
"""
import argparse
import json
from pathlib import Path


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("bundle")
    args = p.parse_args()
    for path in sorted(Path(args.bundle).glob("*_cross_section.json")):
        sec = json.loads(path.read_text())
        curve = sec["mean_loss"]
        peak = max(range(len(curve)), key=curve.__getitem__)
        bm = sec["boundary_mean"]
        print(f"{path.name[: -len('_cross_section.json')]:<12} peak {peak:>2}/{len(curve) - 1}  "
              f"boundary {'none' if bm is None else f'{bm * 255:.1f}/255'}")
        print("   " + " ".join(f"{v:.3f}" for v in curve))


if __name__ == "__main__":
    main()
