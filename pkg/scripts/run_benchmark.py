"""End-to-end benchmark: train the source model once, run every method over
the seed list on the headline continual schedule, and print the comparison
table.

    python3 scripts/run_benchmark.py --out runs/benchmark
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lifelong_tta.cli import (  # noqa: E402
    ExperimentConfig,
    cmd_adapt,
    cmd_report,
    cmd_train_source,
)

DEFAULT_METHODS = "source,bn_adapt,pseudo_label,tent,cotta,petal_sres,petal_fim"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/benchmark")
    parser.add_argument("--methods", default=DEFAULT_METHODS)
    parser.add_argument("--seeds", default="0,1,2,3,4")
    args = parser.parse_args()

    cfg = ExperimentConfig(
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        out_dir=args.out,
    )
    out = Path(args.out)
    if not (out / "source_model.ptta").exists():
        summary = cmd_train_source(cfg)
        print(
            f"source model trained: clean test error {summary['clean_test_error']:.2f}%"
        )
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for method in methods:
        cmd_adapt(cfg, [method])
        print(f"ran {method} over seeds {cfg.seeds}")
    table, _ = cmd_report([args.out])
    print()
    print(table)
    return 0


if __name__ == "__main__":
    sys.exit(main())
