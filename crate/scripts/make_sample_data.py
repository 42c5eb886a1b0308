"""Regenerates crates/core/data/sp500_sample.csv (synthetic GBM prices)."""
import csv
import sys

import numpy as np
import pandas as pd

SEED = 20170901


def main(path):
    rng = np.random.default_rng(SEED)
    dates = pd.bdate_range("2012-01-03", "2017-09-01")
    n = len(dates)
    mu, sigma = 0.0004, 0.009
    # occasional jumps so the tails are fatter than gaussian
    shocks = rng.normal(mu, sigma, n) + rng.binomial(1, 0.02, n) * rng.normal(0, 0.03, n)
    close = 1277.06 * np.exp(np.cumsum(shocks))
    open_ = close * np.exp(rng.normal(0, 0.003, n))
    high = np.maximum(open_, close) * np.exp(np.abs(rng.normal(0, 0.004, n)))
    low = np.minimum(open_, close) * np.exp(-np.abs(rng.normal(0, 0.004, n)))
    volume = rng.integers(2_000_000_000, 5_000_000_000, n)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["Date", "Open", "High", "Low", "Close", "Volume"])
        for row in zip(dates, open_, high, low, close, volume):
            d, o, h, l, c, v = row
            w.writerow([d.strftime("%Y-%m-%d"), f"{o:.2f}", f"{h:.2f}", f"{l:.2f}", f"{c:.2f}", v])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/data/sp500_sample.csv")
