"""Overfit a small Tree-LSTM on synthetic sentiment trees and print the
learning curve.

    python scripts/overfit_sentiment.py --state-size 32 --trees 32
"""

import argparse

from dynbatch.experiments import OverfitConfig, overfit_sentiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trees", type=int, default=32)
    p.add_argument("--state-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--target", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    cfg = OverfitConfig(n_trees=args.trees, state_size=args.state_size, max_epochs=args.epochs,
                        lr=args.lr, target_accuracy=args.target, seed=args.seed)
    res = overfit_sentiment(cfg)
    for epoch, (loss, acc) in enumerate(zip(res.losses, res.accuracies), 1):
        print(f"epoch {epoch:4d}  loss {loss:.4f}  root accuracy {acc:.3f}")
    verdict = "reached" if res.reached else "did not reach"
    print(f"{verdict} {cfg.target_accuracy:.0%} root accuracy after {res.epochs} epochs")


if __name__ == "__main__":
    main()
