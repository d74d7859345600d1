"""Train the query network on one synthetic scene, then read off occupancy.

Run: python demos/03_train_and_voxelize.py [steps]
"""
import sys

from gausstr.config import RunConfig
from gausstr.occupancy import iou, voxelize
from gausstr.synthetic import ground_truth_grid
from gausstr.training import Trainer, reconstructed_features

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = RunConfig(queries_per_view=64, C=32, C_R=16, steps=steps, log_every=0)
tr = Trainer(cfg)
data = tr.dataset[0]
gt = ground_truth_grid(data.scene)


def evaluate():
    gs = tr.predict(data)
    grid = voxelize(gs, data.scene.text_prototypes(), gt.spec, cfg.tau_occ,
                    feat=reconstructed_features(gs, tr.basis))
    return iou(grid, gt, data.scene.class_names)


# The only supervision is agreement with the oracle after splatting back into
# the cameras: features through the PCA basis, plus depth.  No voxel labels.
for s in range(steps):
    rep = tr.step()
    if s % max(1, steps // 5) == 0 or s == steps - 1:
        m = evaluate()
        print(f"step {s:4d}  loss {rep.total:.4f} (feat {rep.feat:.4f}, silog {rep.silog:.4f}, l1 {rep.l1:.4f})"
              f"  binary IoU {m['binary_iou']:.3f}  mIoU {m['miou']:.3f}")
print("per class:", {k: round(v, 3) for k, v in evaluate()["per_class"].items()})
