"""Empirical variance of the stratified shading estimator against ray count.

    python3 scripts/mc_variance.py
"""

import numpy as np
import torch

from lumikit.geometry import Rng
from lumikit.shading import shade_pixel


def main():
    g = np.random.default_rng(0)
    env = torch.tensor(g.uniform(0, 1, (16, 32, 3)) ** 2 * 2)
    n = np.array([0.2, -0.3, 0.93])
    n /= np.linalg.norm(n)
    gpix = {"opacity": 1.0, "position": np.zeros(3), "normal": n, "view": n,
            "albedo": [0.6, 0.5, 0.4], "roughness": [0.6]}
    prev = None
    for k in range(4, 14, 2):
        vals = np.array([shade_pixel(gpix, env, None, 2 ** k, Rng(s)).numpy() for s in range(40)])
        var = vals.var(0, ddof=1).sum()
        ratio = "" if prev is None else f"  ratio vs previous {prev / var:6.1f} (1/N predicts 4)"
        print(f"N = 2^{k:<2d} var {var:.3e}{ratio}")
        prev = var


if __name__ == "__main__":
    main()
