"""Train on a single toy shape and report accuracy per width: a capacity
sanity check for the block design.

    python3 scripts/overfit_check.py --widths 16 32 64 --epochs 200
"""

import argparse
import time

from diffusionnet.experiments import ToyTaskConfig, _samples
from diffusionnet.network import NetworkConfig
from diffusionnet.training import TrainConfig, evaluate, fit


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--widths", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--shape-seed", type=int, default=7)
    args = p.parse_args()

    task = ToyTaskConfig()
    data = _samples([task.shape(args.shape_seed)], 128)
    print("width  accuracy  seconds")
    for w in args.widths:
        t0 = time.perf_counter()
        net = NetworkConfig(width=w, n_blocks=4, input_mode="hks", n_out=task.n_classes)
        params, _ = fit(data, net, TrainConfig(epochs=args.epochs))
        acc = evaluate(data, params)["accuracy"]
        print(f"{w:5d}  {100 * acc:8.2f}  {time.perf_counter() - t0:7.1f}", flush=True)


if __name__ == "__main__":
    main()
