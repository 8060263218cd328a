"""Directional ablations on the synthetic tasks.

    python scripts/ablation_runs.py levels      # pyramid N=3 vs single level L=1 (scale-count)
    python scripts/ablation_runs.py question    # full model vs no question refinement (transition)
"""

import argparse
import json
import time

from tpt.experiments import PROTOCOLS, run_protocol
from tpt.train import format_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("protocol", choices=sorted(PROTOCOLS))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", help="directory for ablation.csv")
    args = ap.parse_args()
    t0 = time.perf_counter()
    rows = run_protocol(args.protocol, tuple(args.seeds), args.out)
    print(format_ablation(rows))
    print(json.dumps({r.variant: r.values for r in rows}))
    print(f"{time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
