"""
The classifier head and its parameter budget
============================================

The head sits on a 10x10x2048 feature map. The shape-only backbone stands
in for the pretrained body: it reports its parameter count and produces
features of the right shape, but carries no weights.
"""

from statecnn.model import TinyBackbone, build, set_trainable, summarize

model = build(7)
print(summarize(model).render())

###############################################################################
# A small trainable backbone
# --------------------------
# For fine-tuning experiments the tiny backbone offers real conv units.
# Unfreezing the top four of six moves their weights into the trainable
# column.

tiny = build(7, TinyBackbone(units=6, channels=8), input_side=64)
set_trainable(tiny, 4)
print()
print([(u.name, u.trainable) for u in tiny.backbone.units])
print(tiny.param_count())
