"""Train on synthetic records, then print held-out calibration and the
risk-coverage trade-off of the learned head.

    python3 scripts/calibration_demo.py --n 4000
"""

import argparse

import numpy as np

from unicr import RunConfig
from unicr.evaluation import SyntheticSpec, aurc, coverage_at_risk, generate_synthetic, rc_curve
from unicr.metrics import brier, ece, label_values, nll
from unicr.pipeline import confidences_for, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    records = generate_synthetic(SyntheticSpec(n=args.n, seed=args.seed))
    test = generate_synthetic(SyntheticSpec(n=args.n, seed=args.seed + 1), prefix="test-")
    cfg = RunConfig.from_dict({"features": {"rag": True, "verifier": True, "tool": True}, "seed": args.seed})
    art = train(records, cfg)

    c = confidences_for(art, test)
    r = label_values([rec.label for rec in test])
    p = np.array([rec.debug["true_p"] for rec in test])
    curve = rc_curve(c, r)
    print(f"features         {len(art.schema)}")
    print(f"threshold        {art.policy.global_tau:.4f} ({art.policy.mode})")
    print(f"ECE (15 bins)    {ece(c, r, 'fixed15'):.4f}")
    print(f"Brier            {brier(c, r):.4f}  (true p: {brier(p, r):.4f})")
    print(f"NLL              {nll(c, r):.4f}  (true p: {nll(p, r):.4f})")
    print(f"AURC             {aurc(curve):.4f}")
    for rho in (0.02, 0.05, 0.1):
        print(f"coverage@{rho:<5}   {coverage_at_risk(curve, rho):.3f}")


if __name__ == "__main__":
    main()
