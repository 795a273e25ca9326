"""Full model vs. w/o gate vs. w/o colour modulation: aligned albedo MSE.

    python3 scripts/ablation.py
"""

import json

from lumikit.evaluation import albedo_mse
from lumikit.scenegen import SceneSpec, bundled_spec_path, gen_scene
from lumikit.train import TrainConfig, train_stage1, train_stage2


def main():
    ds = gen_scene(SceneSpec.load(bundled_spec_path()), with_static=False)
    rows = {}
    for name, kw in (("full", {}), ("no_gate", {"no_gate": True}), ("no_deltac", {"no_deltac": True})):
        cfg = TrainConfig(**kw)
        r = train_stage2(train_stage1(ds, cfg), ds, cfg)
        rows[name] = {"albedo_mse_aligned": albedo_mse(r.model, ds), "seconds": round(r.seconds, 1)}
        print(name, json.dumps(rows[name]), flush=True)
    print("ordering holds:", rows["full"]["albedo_mse_aligned"] < min(
        rows["no_gate"]["albedo_mse_aligned"], rows["no_deltac"]["albedo_mse_aligned"]))


if __name__ == "__main__":
    main()
