"""Run the verification suites and then the training experiments, writing
JSON/CSV reports.

    python3 scripts/run_experiments.py --out reports
    python3 scripts/run_experiments.py --only orientation ablation
"""

import argparse
import logging
import sys

from diffusionnet.experiments import (EXPERIMENTS, SUITES, record_verification,
                                      require_verification, run_experiment, run_verify)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="reports")
    p.add_argument("--only", nargs="+", choices=EXPERIMENTS, default=list(EXPERIMENTS))
    p.add_argument("--skip-verify", action="store_true",
                   help="reuse an existing verification stamp")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ok = True
    if not args.skip_verify:
        for suite in SUITES:
            rep = run_verify(suite)
            record_verification(rep)
            rep.write(args.out)
            print(rep.summary(), flush=True)
            ok &= rep.passed
    require_verification()
    for name in args.only:
        rep = run_experiment(name)
        rep.write(args.out)
        print(rep.summary(), flush=True)
        ok &= rep.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
