"""Generate the bundled box-on-plane scene and run both training stages.

    python3 scripts/train_toy.py --out runs/full [--no-gate] [--no-deltac]
"""

import argparse
import json
import time
from pathlib import Path

from lumikit.checkpoint import save_checkpoint
from lumikit.evaluation import albedo_mse, env_texel_error
from lumikit.scenegen import SceneSpec, bundled_spec_path, gen_scene
from lumikit.train import TrainConfig, gate_stats, train_stage1, train_stage2


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-gate", action="store_true")
    p.add_argument("--no-deltac", action="store_true")
    p.add_argument("--stage1-iters", type=int, default=None)
    p.add_argument("--stage2-iters", type=int, default=None)
    a = p.parse_args()
    kw = {k: v for k, v in (("stage1_iters", a.stage1_iters), ("stage2_iters", a.stage2_iters)) if v}
    cfg = TrainConfig(seed=a.seed, no_gate=a.no_gate, no_deltac=a.no_deltac, **kw)
    ds = gen_scene(SceneSpec.load(bundled_spec_path()), with_static=False)

    def progress(stage, it, rec):
        if it % 250 == 0:
            print(f"stage {stage} iter {it:5d} total {rec['total']:.5f}", flush=True)

    t0 = time.time()
    r1 = train_stage1(ds, cfg, progress=progress)
    s1 = gate_stats(r1.model, r1.dynamic)
    r2 = train_stage2(r1, ds, cfg, progress=progress)
    report = {
        "seconds": time.time() - t0,
        "gates_after_stage1": s1,
        "albedo_mse_aligned": albedo_mse(r2.model, ds),
        "albedo_mse_raw": albedo_mse(r2.model, ds, aligned=False),
        "env_texel_distance": env_texel_error(r2.model, ds),
        "config": cfg.to_json(),
    }
    out = Path(a.out)
    save_checkpoint(r2.model, out, cfg.to_json())
    (out / "report.json").write_text(json.dumps(report, indent=1))
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, indent=1))


if __name__ == "__main__":
    main()
