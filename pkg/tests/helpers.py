"""Small synthetic setups shared by the training, CLI and acceptance tests."""
from statecnn import data
from statecnn.data import Preprocess
from statecnn.model import TinyBackbone, build
from statecnn.synthetic import STATES, class_patterns
from statecnn.train import StageConfig, TrainConfig


def synthetic_split(per_class=8, side=64, seed=0, num_classes=7):
    images, labels = class_patterns(num_classes, per_class, side, seed)
    ds = data.in_memory(list(STATES[:num_classes]), images, labels)
    return data.partition(ds, 0.75, seed)


def tiny_classifier(classes, units=6, channels=8, side=64, seed=0):
    bb = TinyBackbone(units=units, channels=channels, downsample=3, seed=seed)
    return build(list(classes), bb, 0.5, seed, side)


def quick_config(epochs1=2, epochs2=1, k=4, batch=8, side=64, seed=0, **stage2):
    s2 = None
    if epochs2:
        s2 = StageConfig("sgd", stage2.pop("lr", 1e-2), epochs2, momentum=0.9, decay=1e-6,
                         unfreeze_top_k=k, **stage2)
    return TrainConfig(StageConfig("rmsprop", 1e-3, epochs1), s2, batch, seed, None, Preprocess(side))

