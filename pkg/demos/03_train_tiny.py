"""Train the desk-scale LG model on synthetic blobs and look at its paths.

Each class is the same bright blob at a different place, so the model has
to use position.  After training, the per-path feature maps of stage 2 are
written as PGM files next to a sample image.

    python3 demos/03_train_tiny.py [steps] [out_dir]

The default of 60 steps takes well under a minute; 500 steps reproduces
the full convergence run.
"""
import sys
from pathlib import Path

import numpy as np

from lgtransformer.pnm import write_ppm
from lgtransformer.train import SyntheticDataset, TrainConfig, dump_features, infer, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_run")

rec, params = train("tiny-lg", TrainConfig(total_steps=steps, eval_every=10), out_dir=out,
                    log=lambda e: "train_acc" in e and print(f"step {e['step']:4d}  loss {e['loss']:.4f}  acc {e['train_acc']:.3f}"))
print("final", rec.final)

data = SyntheticDataset()
for k in range(data.num_classes):
    i = int(np.flatnonzero(data.labels == k)[0])
    write_ppm(out / f"class{k}.ppm", np.clip(data.images[i], 0, 1))
    cls, _ = infer(out / "model.ckpt", out / f"class{k}.ppm")
    print(f"class{k}.ppm -> predicted {cls}")

for p in dump_features(out / "model.ckpt", out / "class0.ppm", 2, out / "features"):
    print("wrote", p)
