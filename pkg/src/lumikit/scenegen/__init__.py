from .dataset import SceneDataset, gen_scene, init_gaussians, load_dataset, save_dataset
from .envmaps import DOMINANT_TEXEL, dominant_texel, envmap_presets
from .metrics import eval_metrics
from .oracle import reference_render
from .spec import Motion, OrbitCameras, Primitive, SceneSpec, SpecError, bundled_spec_path

__all__ = [
    "DOMINANT_TEXEL", "Motion", "OrbitCameras", "Primitive", "SceneDataset", "SceneSpec", "SpecError",
    "bundled_spec_path", "dominant_texel", "envmap_presets", "eval_metrics", "gen_scene",
    "init_gaussians", "load_dataset", "reference_render", "save_dataset",
]
