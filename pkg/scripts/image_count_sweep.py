"""Test RMSE of BI_ISFMF against the number of user images P.

Sparse synthetic ratings with 20% of the items held out, as in the
cold-start comparison.  The defaults are the settings of acceptance
criterion 9.

    python3 scripts/image_count_sweep.py --P 1 2 3 4 --repeats 10
"""
import argparse

from bimf.evaluation import format_sweep, image_count_sweep
from bimf.factorization import Hyperparams, NetworkConfig
from bimf.synthetic import SyntheticConfig, generate_synthetic

from compare_synthetic import SMALL_LAYERS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--P", type=int, nargs="+", default=[1, 4])
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=9, help="dataset seed")
    args = p.parse_args()

    cfg = SyntheticConfig(n_users=150, n_items=100, k_true=3, observed_fraction=0.08,
                          noise_sigma=0.1, image_size=(20, 20), selection_bias=1.0)
    ds, images, _ = generate_synthetic(cfg, seed=args.seed)
    net = NetworkConfig(layers=SMALL_LAYERS, image_size=(20, 20), learning_rate=1e-2,
                        batch_size=32)
    hyper = Hyperparams(k=10, outer_max_iters=10, cnn_epochs_per_iter=5, rel_tol=1e-6)
    rows = image_count_sweep(ds, images, args.P, args.repeats, hyper, net,
                             train_fraction=0.7, cold_item_fraction=0.2)
    print(format_sweep(rows))


if __name__ == "__main__":
    main()
