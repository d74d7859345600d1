"""Sweep the number of queries and the segmentation toggle through the CLI.

Each variant trains, voxelizes and evaluates on one shared dataset; the
summaries are plain JSON for side-by-side comparison.

Run: python demos/05_query_count_sweep.py [out_dir] [steps]
"""
import json
import sys
from pathlib import Path

from gausstr.ablation import query_sweep, seg_aug_sweep

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/05")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 100
out.mkdir(parents=True, exist_ok=True)
cfg = out / "base.json"
cfg.write_text(json.dumps({"C": 32, "C_R": 16, "steps": steps}))

for title, summary in (("queries", query_sweep(out / "queries", config=cfg)),
                       ("seg aug", seg_aug_sweep(out / "seg", config=cfg))):
    print(f"-- {title} (dataset {summary['data_hash']})")
    for row in summary["variants"]:
        print(f"{row['variant']:>12}  binary IoU {row['binary_iou']:.3f}  mIoU {row['miou']:.3f}")
