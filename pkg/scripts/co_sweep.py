"""Search FGSM adversarial training runs for catastrophic overfitting.

Trains one FGSM-AT model per (seed, eps, learning rate, width) cell with the
per-epoch FGSM/PGD monitor on and prints the largest FGSM-minus-PGD gap seen
during training.  Overfitting shows up as a gap close to the FGSM accuracy.

    python scripts/co_sweep.py --seeds 0 1 2 3 --eps 16 24 --lr 0.05 0.2
"""
import argparse
import itertools

from gradmask.attacks import AttackSpec
from gradmask.config import ZOO_TRAIN
from gradmask.datasets import gen_blobs
from gradmask.models import ModelSpec
from gradmask.training import Regime, TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    p.add_argument("--eps", type=float, nargs="+", default=[16.0], help="bounds in units of 1/255")
    p.add_argument("--lr", type=float, nargs="+", default=[ZOO_TRAIN["learning_rate"]])
    p.add_argument("--width", type=int, nargs="+", default=[64])
    p.add_argument("--epochs", type=int, default=ZOO_TRAIN["epochs"])
    p.add_argument("--spread", type=float, default=0.15)
    args = p.parse_args()

    print("seed  eps  lr      width  final_fgsm  final_pgd  max_gap  detected")
    hits = total = 0
    for seed, e, lr, w in itertools.product(args.seeds, args.eps, args.lr, args.width):
        eps = e / 255
        ds = gen_blobs(16, 3, 100, args.spread, seed, "train")
        cfg = TrainConfig(**{**ZOO_TRAIN, "epochs": args.epochs, "learning_rate": lr}, seed=seed,
                          regime=Regime("adversarial", AttackSpec("fgsm", eps)), co_monitor=True, monitor_eps=eps)
        rep = train(ModelSpec(widths=(w, w), seed=seed), ds, cfg)
        gap = max(f - q for f, q in zip(rep.fgsm_acc, rep.pgd_acc))
        hits += rep.co_detected
        total += 1
        print(f"{seed:<6}{e:<5g}{lr:<8g}{w:<7}{rep.fgsm_acc[-1]:<12.3f}{rep.pgd_acc[-1]:<11.3f}{gap:<9.3f}{rep.co_detected}")
    print(f"overfitting detected in {hits}/{total} runs")


if __name__ == "__main__":
    main()
