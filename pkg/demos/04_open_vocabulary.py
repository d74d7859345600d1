"""Asking trained Gaussians about a category name never used in training.

Training sees features and depth only; class names enter at voxelization as
prototype vectors.  Here the pillar prototype is dropped and re-added under a
new name; the same Gaussians answer to it.

Run: python demos/04_open_vocabulary.py [steps]
"""
import sys

import numpy as np

from gausstr.config import RunConfig
from gausstr.occupancy import EMPTY, TextPrototypes, voxelize
from gausstr.synthetic import ground_truth_grid
from gausstr.training import Trainer, reconstructed_features

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
tr = Trainer(RunConfig(queries_per_view=64, C=32, C_R=16, steps=steps, seg_aug=False, log_every=0))
tr.run()
data = tr.dataset[0]
gt = ground_truth_grid(data.scene)
gs = tr.predict(data)
feat = reconstructed_features(gs, tr.basis)

known = data.scene.text_prototypes()
keep = [i for i, n in enumerate(known.names) if n != "pillar"]
vocab = TextPrototypes(known.f_T[keep], [known.names[i] for i in keep])
vocab = vocab.with_novel("column", known.f_T[known.names.index("pillar")])
print("query vocabulary:", vocab.names)

grid = voxelize(gs, vocab, gt.spec, 0.1, feat=feat)
col = grid.classes == vocab.names.index("column")
pil = gt.classes == known.names.index("pillar")
print(f"'column' voxels: {col.sum()}, ground-truth pillar voxels: {pil.sum()}, overlap {(col & pil).sum()}")
hit = gt.classes[col]
hit = hit[hit != EMPTY]
if hit.size:
    names = [known.names[c] for c in np.bincount(hit, minlength=len(known.names)).nonzero()[0]]
    print("GT classes under 'column' voxels:", dict(zip(names, np.bincount(hit)[np.bincount(hit) > 0].tolist())))
