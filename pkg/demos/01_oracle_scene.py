"""A synthetic desk scene with its oracle views, then a first render.

Run: python demos/01_oracle_scene.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from gausstr.gaussians import GaussianSet, init_from_depth, stratified_pixels
from gausstr.renderer import render
from gausstr.synthetic import ground_truth_grid, make_scene, render_views
from gausstr.tensor_io import features_to_rgb, save_depth_pgm, save_ppm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/01")
out.mkdir(parents=True, exist_ok=True)

# Boxes on a ground plane, seen by two cameras.  The oracle plays the part of
# the frozen foundation models: noisy per-pixel features plus metric depth.
scene = make_scene(seed=0, C=32, n_views=2)
views = render_views(scene, seed=0)
print("classes:", scene.class_names)
for v, (feat, depth, _) in enumerate(views):
    print(f"view {v}: features {feat.shape}, depth range {depth[depth > 0].min():.2f}..{depth.max():.2f} m")
    save_ppm(out / f"oracle_{v}_feat.ppm", features_to_rgb(feat))
    save_depth_pgm(out / f"oracle_{v}_depth.pgm", depth)

gt = ground_truth_grid(scene)
print("GT grid", gt.spec.dims, "occupied voxels per class:", np.bincount(gt.classes[gt.occupied]))

# Before any learning: one Gaussian per sampled pixel, lifted by the oracle depth
# and carrying the oracle feature found there.
rng = np.random.default_rng(0)
cam = scene.feature_camera(0)
feat, depth, _ = views[0]
px = stratified_pixels(200, cam.width, cam.height, rng)
mu, S0, R0, active = init_from_depth(px, depth, cam, s0_factor=0.02)
cols = np.clip(px.astype(int), 0, [cam.width - 1, cam.height - 1])
f = feat[cols[:, 1], cols[:, 0]]
gs = GaussianSet(mu, S0, R0, np.where(active, 0.8, 0.0), f, np.zeros(len(px), dtype=np.int64))
view = render(gs, scene.cameras[0], downsample=scene.feature_downsample)
print(f"lifted 200 pixels; rendered coverage {np.mean(view.trans < 0.5):.0%} of the view")
save_ppm(out / "lifted_feat.ppm", features_to_rgb(view.feat))
print("previews written to", out)
