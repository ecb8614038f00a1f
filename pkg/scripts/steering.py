"""Run the two-mode steering experiment and print before/after numbers.

    python3 scripts/steering.py [--reward halfplane|region] [--seed 0]
"""

import argparse
import json

from rgdm.experiments import SteeringSetup, datasets, evaluate_model, halfplane_spec, region_spec, run_finetune, run_pretrain


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reward", choices=("halfplane", "region"), default="halfplane")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    setup = SteeringSetup(seed=args.seed)
    train, ref = datasets(setup)
    ckpt, t_pre, _ = run_pretrain(setup, train)
    before = evaluate_model(ckpt, ref, setup, seed=11)
    if args.reward == "halfplane":
        tuned, t_ft, log = run_finetune(ckpt, setup, train, halfplane_spec())
    else:
        tuned, t_ft, log = run_finetune(ckpt, setup, train, region_spec(), batch_size=16)
    after = evaluate_model(tuned, ref, setup, seed=11)
    print(json.dumps({"pretrained": before, "finetuned": after, "pretrain_s": t_pre, "finetune_s": t_ft}, indent=1))


if __name__ == "__main__":
    main()
