"""Train the desk-scale denoiser with lifted Bregman and with plain backpropagation.

Writes both runs under ``runs/denoise_demo`` and prints the median validation PSNR
of the noisy inputs and of each reconstruction.
"""
import argparse
from pathlib import Path

import numpy as np

from liftnet import cli
from liftnet.architectures import forward_block
from liftnet.config import RunConfig
from liftnet.inverse_tasks import degrade_dataset, psnr_batch
from liftnet.io import load_checkpoint


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--out", type=Path, default=Path("runs/denoise_demo"))
    args = parser.parse_args()
    base = RunConfig(steps=args.steps, record_every=max(1, args.steps // 20))
    ds = cli.load_dataset(base)
    val = ds.part("val")
    Yva = degrade_dataset(cli.degradation(base), val.images, ds.shape, 2 * base.seed + 1)
    print(f"noisy        {np.median(psnr_batch(Yva, val.images)):.2f} dB")
    for strategy in ("bregman", "conventional"):
        cfg = base.replace(strategy=strategy)
        cli.cmd_train(cfg, args.out / strategy)
        net = load_checkpoint(args.out / strategy / "checkpoint.bin")
        rec = forward_block(net, Yva).output
        print(f"{strategy:<12} {np.median(psnr_batch(rec, val.images)):.2f} dB")


if __name__ == "__main__":
    main()
