"""Train and evaluate the default zoo for several seeds and print the orderings.

    python scripts/run_zoo.py --out runs/zoo --seeds 0 1 2
"""
import argparse
import json
from pathlib import Path

from gradmask.cli import main as cli_main
from gradmask.config import EPS_SMALL
from gradmask.zoo import eps_tag


def orderings(bundle: Path, masked: str, robust: str) -> dict:
    s = {p.name[: -len("_summary.json")]: json.loads(p.read_text()) for p in bundle.glob("*_summary.json")}
    tag = eps_tag(EPS_SMALL)
    m, r = s[masked], s[robust]
    bench = next(b for b in m["benchmarks"] if eps_tag(b["epsilon"]) == tag)
    mm, rm = m["metrics"]["test"], r["metrics"]["test"]
    return {
        "fgsm_minus_pgd": bench["fgsm"] - bench["pgd"],
        "cosine": (mm[f"fgsm_pgd_cosine@{tag}"], rm[f"fgsm_pgd_cosine@{tag}"]),
        "collinearity": (mm[f"pgd_collinearity@{tag}"], rm[f"pgd_collinearity@{tag}"]),
        "linearization": (mm[f"linearization_error@{tag}"], rm[f"linearization_error@{tag}"]),
        "masked_blackbox_flag": m["checklist"]["blackbox_beats_whitebox"],
        "standard_suspect": s["standard"]["checklist"]["overall_suspect"],
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/zoo")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--masked", default="fgsm_16")
    p.add_argument("--robust", default="pgd_8")
    args = p.parse_args()
    for seed in args.seeds:
        bundle = Path(args.out) / f"seed{seed}"
        code = cli_main(["--out", str(bundle), "--seed", str(seed), "--jobs", str(args.jobs), "zoo"])
        print(f"seed {seed}: exit {code}")
        for k, v in orderings(bundle, args.masked, args.robust).items():
            print(f"  {k}: {v}")


if __name__ == "__main__":
    main()
