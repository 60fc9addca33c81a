"""
Two-stage training on synthetic states
======================================

Stage 1 trains the head with the backbone frozen. Stage 2 reloads the best
stage-1 checkpoint, unfreezes the top backbone units and fine-tunes with
momentum SGD. Every epoch is checkpointed and the best is chosen by
validation loss, then accuracy, then the earliest epoch.
"""

import tempfile
from pathlib import Path

from statecnn import checkpoint, data
from statecnn.model import TinyBackbone, build
from statecnn.synthetic import STATES, class_patterns
from statecnn.train import StageConfig, TrainConfig, evaluate, export_metrics, run_two_stage

images, labels = class_patterns(num_classes=7, per_class=12, side=64, seed=0)
train, val = data.partition(data.in_memory(STATES, images, labels), 0.8, seed=0)

###############################################################################
# Batchnorm moving statistics keep 99% of their value per step by default,
# which takes several hundred steps to settle. This short run has about 300
# steps in total, so a faster momentum keeps inference-mode predictions in
# line with training.

model = build(list(STATES), TinyBackbone(units=6, channels=8), dropout_rate=0.5, seed=0,
              input_side=64, bn_momentum=0.9)
cfg = TrainConfig(
    stage1=StageConfig("rmsprop", 1e-3, epochs=30),
    stage2=StageConfig("sgd", 1e-3, epochs=10, momentum=0.9, decay=1e-6, unfreeze_top_k=4),
    batch_size=8,
    augment=None,
    preprocess=data.Preprocess(64),
)

out = Path(tempfile.mkdtemp())
results = run_two_stage(cfg, model, train, val, out,
                        on_epoch=lambda m: print(f"stage {m.stage} epoch {m.epoch:3d} "
                                                 f"loss {m.train_loss:.3f} val_loss {m.val_loss:.3f} "
                                                 f"val_acc {m.val_acc:.3f}"))
for r in results:
    print(f"stage {r.best.stage}: best epoch {r.best.epoch} -> {Path(r.best_path).name}")

paths = export_metrics([m for r in results for m in r.history], out)
print("metrics:", paths["csv"], paths["accuracy"], paths["loss"])

# score the selected checkpoint rather than the final weights
checkpoint.load(results[-1].best_path, model)
res = evaluate(model, val, 8, cfg.preprocess)
print(f"validation accuracy {res.accuracy:.3f}")
print(res.confusion)
