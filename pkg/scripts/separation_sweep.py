"""Stage-1 only sweep over the separation weight and start iteration;
prints the mean inference gate over GT-dynamic and GT-static splats.

    python3 scripts/separation_sweep.py --weights 0.001 0.005 --starts 1000 2000
"""

import argparse
import itertools
import json

from lumikit.losses import Stage1Weights
from lumikit.scenegen import SceneSpec, bundled_spec_path, gen_scene
from lumikit.train import TrainConfig, gate_stats, train_stage1


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--weights", type=float, nargs="+", default=[0.001, 0.005])
    p.add_argument("--starts", type=int, nargs="+", default=[1000])
    p.add_argument("--iters", type=int, default=3000)
    a = p.parse_args()
    ds = gen_scene(SceneSpec.load(bundled_spec_path()), with_static=False)
    for lam, start in itertools.product(a.weights, a.starts):
        cfg = TrainConfig(stage1_iters=a.iters,
                          stage1=Stage1Weights(separation=lam, separation_start_iter=start))
        r = train_stage1(ds, cfg)
        print(json.dumps({"separation": lam, "start": start, **gate_stats(r.model, r.dynamic),
                          "seconds": round(r.seconds, 1)}), flush=True)


if __name__ == "__main__":
    main()
