"""PMF vs ISFMF_ITEM vs BI_ISFMF on planted synthetic data with cold items.

Prints the per-seed all-pairs test RMSE and the mean over seeds.  The
defaults are the settings of acceptance criterion 5.

    python3 scripts/compare_synthetic.py --seeds 5
"""
import argparse
import time

import numpy as np

from bimf.evaluation import compare_models
from bimf.factorization import Hyperparams, NetworkConfig
from bimf.synthetic import SyntheticConfig, generate_synthetic

SMALL_LAYERS = (
    {"type": "conv", "kernel": 3, "channels": 8},
    {"type": "relu"},
    {"type": "maxpool", "window": 2},
    {"type": "conv", "kernel": 3, "channels": 16},
    {"type": "relu"},
    {"type": "maxpool", "window": 2},
    {"type": "flatten"},
    {"type": "dense", "out": 32},
)
KINDS = ["PMF", "ISFMF_ITEM", "BI_ISFMF"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--users", type=int, default=150)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--observed", type=float, default=0.08)
    p.add_argument("--cold", type=float, default=0.2, help="fraction of items held out")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lambda-w-user", type=float, default=300.0)
    args = p.parse_args()

    net = NetworkConfig(layers=SMALL_LAYERS, image_size=(20, 20), bundle_size=3,
                        learning_rate=1e-2, batch_size=32)
    scores = []
    start = time.perf_counter()
    for seed in range(args.seeds):
        cfg = SyntheticConfig(n_users=args.users, n_items=args.items, k_true=3,
                              observed_fraction=args.observed, noise_sigma=0.1,
                              image_size=(20, 20), selection_bias=1.0)
        ds, images, _ = generate_synthetic(cfg, seed)
        hyper = Hyperparams(k=args.k, outer_max_iters=args.iters,
                            cnn_epochs_per_iter=args.epochs, rel_tol=1e-6,
                            lambda_w_user=args.lambda_w_user, seed=seed)
        table = compare_models(ds, images, KINDS, [0.7], hyper, net,
                               cold_item_fraction=args.cold, seed=seed)
        row = [r.rmse_all for r in table.rows]
        scores.append(row)
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.4f}" for k, v in zip(KINDS, row))
              + f"  ({time.perf_counter() - start:.0f} s)", flush=True)
    mean = np.mean(scores, axis=0)
    print("mean:    " + "  ".join(f"{k} {v:.4f}" for k, v in zip(KINDS, mean)))
    print(f"BI_ISFMF below PMF by {(mean[0] - mean[2]) / mean[0] * 100:.1f}%")


if __name__ == "__main__":
    main()
