"""Asymptotic PM rate vs distance for several misalignments, with MDI and PLOB for reference."""
import argparse
import time
from pathlib import Path

import numpy as np

from pmqkd import ChannelParams, ProtocolParams
from pmqkd.rates import scan_distance, scan_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--e0", default="0.01,0.05,0.09,0.13")
    ap.add_argument("--step", type=float, default=5.0)
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    params = ProtocolParams()
    distances = np.arange(0, 500 + args.step / 2, args.step)
    for e0 in (float(x) for x in args.e0.split(",")):
        ch = ChannelParams(misalignment=e0)
        t0 = time.perf_counter()
        res = scan_distance(ch, params, ["pm-asym", "mdi", "plob"], distances, workers=args.workers)
        path = args.out / f"asym_e0_{e0:g}.csv"
        path.write_text(scan_to_csv(res, ch))
        d = res.crossings["pm-asym"]
        print(f"e0={e0:.2%}  crossing={'none' if d is None else f'{d:.2f} km'}  ({time.perf_counter() - t0:.1f} s) -> {path}")


if __name__ == "__main__":
    main()
