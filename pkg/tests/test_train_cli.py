import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from lumikit.cli import EXIT_OK, EXIT_USAGE, content_hash, main
from lumikit.losses import Stage1Weights, Stage2Weights
from lumikit.scenegen.dataset import gen_scene
from lumikit.scenegen.spec import SceneSpec, bundled_spec_path
from lumikit.train import (
    NumericalError, TrainConfig, gate_stats, stage2_groups, train_stage1, train_stage2,
)


def tiny_spec_dict():
    d = json.loads(bundled_spec_path().read_text())
    d.update(frames=3, image_size=[16, 16])
    return d


@pytest.fixture(scope="module")
def tiny():
    return gen_scene(SceneSpec.from_json(tiny_spec_dict()), quality="fast", with_static=False)


def tiny_config(**kw):
    base = dict(stage1_iters=6, stage2_iters=3, init_spacing=0.4, mlp_depth=2, mlp_width=16,
                stage1=Stage1Weights(separation_start_iter=2, deform_warmup_iter=2),
                stage2=Stage2Weights(pixels=8, rays=4))
    base.update(kw)
    return TrainConfig(**base)


def test_config_json_round_trip():
    cfg = tiny_config(no_gate=True)
    back = TrainConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg
    with pytest.raises(ValueError):
        TrainConfig(stage1_iters=0)


def test_paper_scale_preset():
    cfg = TrainConfig.paper_scale()
    assert (cfg.stage1_iters, cfg.stage2_iters, cfg.mlp_depth, cfg.mlp_width) == (35000, 20000, 8, 256)


def test_two_stage_run(tiny):
    cfg = tiny_config()
    r1 = train_stage1(tiny, cfg)
    assert len(r1.log) == 6 and all(np.isfinite(rec["total"]) for rec in r1.log)
    assert "separation" in r1.log[0]
    geo = {k: v.clone() for k, v in r1.model.cloud.tensors().items() if k in ("means", "quats", "scales", "logit")}
    mlp = {n: p.clone() for n, p in r1.model.field.named_parameters() if not n.startswith("heads.dc")}
    r2 = train_stage2(r1, tiny, cfg)
    assert len(r2.log) == 9
    c = r2.model.cloud
    for k, v in geo.items():
        assert torch.equal(c.tensors()[k], v), f"{k} changed in stage 2"
    for n, p in r2.model.field.named_parameters():
        if n in mlp:
            assert torch.equal(p, mlp[n]), n
    assert r2.model.has_materials and r2.model.env.shape == (16, 32, 3)
    assert torch.all(r2.model.env >= 0) and torch.all((c.albedo >= 0) & (c.albedo <= 1))
    stats = gate_stats(r2.model, r2.dynamic)
    assert 0 <= stats["dynamic_mean"] <= 1 and 0 <= stats["static_mean"] <= 1


def test_stage2_freezes_geometry_groups(tiny):
    cfg = tiny_config()
    r1 = train_stage1(tiny, replace(cfg, stage1_iters=1))
    r1.model.env = torch.zeros(16, 32, 3)
    groups = {g.name: g for g in stage2_groups(r1.model, cfg)}
    assert all(groups[k].frozen for k in ("means", "quats", "scales", "logit", "mlp_frozen"))
    assert not any(groups[k].frozen for k in ("env", "albedo", "roughness", "opacity", "color", "dc_head"))
    assert groups["opacity"].lr == pytest.approx(cfg.lr_opacity * 0.1)


def test_training_deterministic(tiny):
    cfg = tiny_config(stage1_iters=4)
    a = train_stage1(tiny, cfg).model.cloud.tensors()
    b = train_stage1(tiny, cfg).model.cloud.tensors()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_no_gate_keeps_logits(tiny):
    r = train_stage1(tiny, tiny_config(no_gate=True))
    assert np.all(r.model.gate_values() == 1.0)
    assert torch.all(r.model.cloud.logit == 0.01)
    assert all("separation" not in rec for rec in r.log)


def test_nan_detected(tiny):
    bad = replace(tiny, frames=tiny.frames * np.nan)
    with pytest.raises(NumericalError) as e:
        train_stage1(bad, tiny_config(nan_check_every=1))
    assert e.value.stage == 1 and e.value.iteration == 0


# --- command line ------------------------------------------------------------

def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_usage_errors(tmp_path, capsys):
    assert run(["gen-scene", "--spec", tmp_path / "nope.json", "--out", tmp_path / "d"], capsys)[0] == EXIT_USAGE
    bad = tmp_path / "bad.json"
    d = tiny_spec_dict()
    d["frames"] = 0
    bad.write_text(json.dumps(d))
    code, _, err = run(["gen-scene", "--spec", bad, "--out", tmp_path / "d"], capsys)
    assert code == EXIT_USAGE and "frames" in err
    assert run(["train", "--data", tmp_path / "missing", "--out", tmp_path / "ck"], capsys)[0] == EXIT_USAGE
    assert run(["relight", "--ckpt", tmp_path, "--env", "x", "--cam", "y", "--out", "z"], capsys)[0] == EXIT_USAGE
    assert run(["frobnicate"], capsys)[0] == EXIT_USAGE


def test_cli_pipeline(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(tiny_spec_dict()))
    data = tmp_path / "data"
    code, out, _ = run(["gen-scene", "--spec", spec, "--out", data, "--quality", "fast", "--no-static"], capsys)
    assert code == EXIT_OK
    man = json.loads(out)
    assert man["command"] == "gen-scene" and man["input_hash"] == content_hash([spec])

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"init_spacing": 0.4, "mlp_depth": 2, "mlp_width": 16}))
    train = ["train", "--data", data, "--config", cfg, "--stage1-iters", 3, "--stage2-iters", 2,
             "--rays", 4, "--pixels", 8, "--seed", 5]
    hashes = []
    for name in ("ck1", "ck2"):
        code, out, _ = run(train + ["--out", tmp_path / name], capsys)
        assert code == EXIT_OK
        man = json.loads(out)
        assert man["seed"] == 5 and man["config"]["stage2"]["rays"] == 4
        files = [tmp_path / name / f for f in ("gaussians.bin", "mlp.bin", "env.pfm")]
        hashes.append(content_hash(files))
    assert hashes[0] == hashes[1]
    lines = (tmp_path / "ck1" / "loss.csv").read_text().splitlines()
    assert lines[0].startswith("stage,iter") and len(lines) == 1 + 5

    cams = data / "dynamic" / "cameras.json"
    code, out, _ = run(["relight", "--ckpt", tmp_path / "ck1", "--env", data / "dynamic" / "gt" / "env.pfm",
                        "--cam", cams, "--rays", 4, "--out", tmp_path / "relit" / "0000.pfm"], capsys)
    assert code == EXIT_OK and (tmp_path / "relit" / "0000.ppm").exists()
    assert run(["relight", "--ckpt", tmp_path / "ck1", "--env", data / "dynamic" / "gt" / "env.pfm",
                "--cam", cams, "--frame", 99, "--out", tmp_path / "x.pfm"], capsys)[0] == EXIT_USAGE

    code, _, _ = run(["render-maps", "--ckpt", tmp_path / "ck1", "--cam", cams, "--t", 0.25,
                      "--out", tmp_path / "maps"], capsys)
    assert code == EXIT_OK
    for name in ("albedo", "roughness", "normal", "depth", "separation"):
        assert (tmp_path / "maps" / f"{name}.pfm").exists()

    code, _, _ = run(["eval", "--pred", tmp_path / "ck1", "--gt", data / "dynamic" / "gt", "--kind", "envmap",
                      "--out", tmp_path / "env_eval.json"], capsys)
    assert code == EXIT_OK
    res = json.loads((tmp_path / "env_eval.json").read_text())
    assert "texel_distance" in res["frames"][0] or "angular_error_deg" in res["frames"][0]
