"""End-to-end demo: generate weak-label clips, train, and report metrics.

Writes the dataset, checkpoint, and training log under --out so the run can
be inspected or re-scored with the command-line tools afterwards.
"""

import argparse
import os
import sys
from dataclasses import replace

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from wlat.data import SynthConfig, generate_synthetic, stack_features, stack_targets, write_dataset, write_truth
from wlat.metrics import evaluate, human_table
from wlat.model import build_model, parse_arch, predict_scores, save_weights
from wlat.train import TrainConfig, fit


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--arch", default="2-A-1-A")
    parser.add_argument("--hidden-units", type=int, default=64)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--batch-size", type=int, default=100)
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--valid-samples", type=int, default=500)
    parser.add_argument("--out", default="runs/synthetic")
    args = parser.parse_args()

    cfg = SynthConfig(n_samples=2000 + args.valid_samples, seed=args.seed)
    samples, truth = generate_synthetic(cfg)
    split = cfg.n_samples - args.valid_samples
    train_samples, valid_samples = samples[:split], samples[split:]

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "train.wlad"), "wb") as handle:
        write_dataset(train_samples, replace(cfg.header(), n_samples=split), handle)
    with open(os.path.join(args.out, "truth.tsv"), "w", encoding="utf-8") as handle:
        write_truth(truth, handle)

    spec = parse_arch(args.arch, args.hidden_units, cfg.n_classes)
    model = build_model(spec, cfg.n_features, init_seed=args.seed)
    train_cfg = TrainConfig(
        arch=args.arch, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed, eval_every=5,
    )
    print(f"training {args.arch} (H={args.hidden_units}) on "
          f"{split} clips, validating on {args.valid_samples}")
    result = fit(model, train_samples, valid_samples, train_cfg)

    with open(os.path.join(args.out, "model.wlam"), "wb") as handle:
        save_weights(model, handle)
    with open(os.path.join(args.out, "train_log.tsv"), "w", encoding="utf-8") as handle:
        handle.write("\n".join(result.log_lines) + "\n")

    report = evaluate(
        predict_scores(model, stack_features(valid_samples)),
        stack_targets(valid_samples, cfg.n_classes),
    )
    print(human_table(report))
    print(f"best valid mAP {result.best_map:.4f} at epoch {result.best_epoch}")
    print(f"artifacts in {args.out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
