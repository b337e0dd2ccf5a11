"""Train several architectures on the same synthetic split and tabulate metrics.

Single-level baselines and multi-level variants see identical data, identical
initialization seeds, and identical optimizer settings, so differences in the
table reflect the architecture alone.
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from wlat.data import SynthConfig, generate_synthetic
from wlat.model import build_model, parse_arch
from wlat.train import TrainConfig, fit

DEFAULT_ARCHS = ["3-A", "2-A-1-A", "1-A-1-A-1-A", "3-A-3-A"]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--archs", nargs="+", default=DEFAULT_ARCHS)
    parser.add_argument("--hidden-units", type=int, default=64)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--batch-size", type=int, default=100)
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = SynthConfig(n_samples=2500, seed=args.seed)
    samples, _ = generate_synthetic(cfg)
    train_samples, valid_samples = samples[:2000], samples[2000:]

    rows = []
    for arch in args.archs:
        spec = parse_arch(arch, args.hidden_units, cfg.n_classes)
        model = build_model(spec, cfg.n_features, init_seed=args.seed)
        train_cfg = TrainConfig(
            arch=arch, epochs=args.epochs, batch_size=args.batch_size,
            lr=args.lr, seed=args.seed, eval_every=5,
        )
        start = time.monotonic()
        result = fit(model, train_samples, valid_samples, train_cfg)
        report = result.best_report
        rows.append((arch, result.best_epoch, report.mean_ap,
                     report.mean_auc, report.mean_dprime, time.monotonic() - start))
        print(f"done {arch}: mAP {report.mean_ap:.4f}")

    print(f"\n{'arch':<14}{'best epoch':>11}{'mAP':>9}{'AUC':>9}{'d-prime':>10}{'secs':>7}")
    for arch, epoch, mean_ap, mean_auc, mean_dprime, secs in rows:
        print(f"{arch:<14}{epoch:>11}{mean_ap:>9.4f}{mean_auc:>9.4f}"
              f"{mean_dprime:>10.3f}{secs:>7.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
