"""Pretrain a small sparse model for a few hundred steps and watch the three task losses fall.

The full-length run (2000 steps, batches of 32+32+32) takes about ten minutes
on one core: `vlmoe train --steps 2000 --out runs/toy`.
"""

import sys
import tempfile
from pathlib import Path

from vlmoe import data, harness

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200

scene = data.generate_scenes("train", 1, 0)[0]
print("a scene:", scene.descriptor)
print("its caption:", " ".join(scene.caption_words()))

with tempfile.TemporaryDirectory() as tmp:
    spec = harness.ExperimentSpec(steps=steps, batch=[16, 16, 16], train_scenes=1024, val_scenes=64,
                                  eval_every=max(steps // 4, 1), routing_log_every=max(steps // 2, 1), out=tmp)
    spec.validate()
    (result,) = harness.cmd_train(spec)
    print(f"\n{'step':>5} {'total':>8} {'mlm':>7} {'mim':>7} {'vlm':>7}")
    for row in result.val_rows:
        print(f"{row['step']:5d} {row['total']:8.3f} {row['mlm']:7.3f} {row['mim']:7.3f} {row['vlm']:7.3f}")

    report = harness.cmd_report(result.out_dir)
    last = [r for r in report["records"] if r["step"] == report["last_step"]]
    print("\nlast logged routing decisions:")
    for r in last:
        print(f"  {r['task']:>3} {r['modality']:>5} layer {r['layer']}: kept {r['kept']}, drop rate {r['drop_rate']:.3f}")
    print("\nreport files:", sorted(p.name for p in (Path(result.out_dir) / "report").iterdir()))
