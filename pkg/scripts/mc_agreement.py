"""Compare one simulated run with the analytic gains and per-group error rates."""
import argparse
import math

from pmqkd import ChannelParams, ProtocolParams
from pmqkd.model import SETTINGS, bit_error_rate, gain_mu
from pmqkd.montecarlo import SimConfig, simulate_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rounds", type=float, default=1e7)
    ap.add_argument("--distance", type=float, default=100.0)
    ap.add_argument("--e0", type=float, default=0.03)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--engine", default="rounds", choices=["aggregate", "rounds"])
    args = ap.parse_args()
    ch = ChannelParams(distance_km=args.distance, misalignment=args.e0)
    params = ProtocolParams(rounds=int(args.rounds))
    run = simulate_run(SimConfig(ch, params, seed=args.seed, engine=args.engine))
    t = run.tallies
    print(f"{run.runtime_s:.2f} s, {run.double_clicks} double clicks")
    print(f"{'quantity':<12}{'observed':>14}{'model':>14}{'z':>8}")
    for a in SETTINGS:
        mu, n, m = params.intensity(a), t.N(a), t.M(a)
        q = gain_mu(ch, mu)
        print(f"{'Q_' + a:<12}{m / n:>14.6g}{q:>14.6g}{(m / n - q) / math.sqrt(q * (1 - q) / n):>8.2f}")
    r = t.row("s")
    for j in range(params.phase_slices // 2):
        e = bit_error_rate(ch, params.mu, j, params.phase_slices)
        k = t.clicked[r, j]
        obs = t.bit_errors[r, j] / k
        print(f"{'E_s[' + str(j) + ']':<12}{obs:>14.6g}{e:>14.6g}{(obs - e) / math.sqrt(e * (1 - e) / k):>8.2f}")


if __name__ == "__main__":
    main()
