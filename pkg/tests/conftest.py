"""Session fixtures: the shared trace-image corpus and classifiers.

The corpus is the expensive shared input for the classifier CV and the
noise sweeps: 680 simulated traces spanning all 4 vendors x 3 framework
families x encoder counts {6, 12, 18, 24} (hidden size 768, except 1024
for the 24-encoder models), rasterized once per session.  672 of them are
the balanced 4 x 3 x 4 x 14 grid; 8 extras at count 12 cycle through
(vendor, framework) pairs so every vendor gains exactly two.

680 splits into five stratified folds of 136 for cross-validation.
"""

import pytest

from tlextract.cnn import Hyper, cnn_train
from tlextract.finetune import ArchSpec
from tlextract.raster import rasterize
from tlextract.tracesim import FRAMEWORKS, VENDORS, build_profile, gen_trace

CORPUS_COUNTS = (6, 12, 18, 24)
CORPUS_REPS = 14
CORPUS_EXTRA = 8
CORPUS_SIZE = (len(VENDORS) * len(FRAMEWORKS) * len(CORPUS_COUNTS)
               * CORPUS_REPS + CORPUS_EXTRA)  # 680


def corpus_arch(count: int) -> ArchSpec:
    return ArchSpec(count, 1024 if count == 24 else 768, 4)


def _image(vendor, framework, count, seed):
    profile = build_profile(vendor, framework, corpus_arch(count), seed=seed)
    return rasterize(gen_trace(profile, seed=seed + 1))


@pytest.fixture(scope="session")
def corpus_images():
    images = []
    seed = 1000
    for vendor in VENDORS:
        for framework in FRAMEWORKS:
            for count in CORPUS_COUNTS:
                for _ in range(CORPUS_REPS):
                    images.append(_image(vendor, framework, count, seed))
                    seed += 2
    pairs = [(v, f) for v in VENDORS for f in FRAMEWORKS]
    for i in range(CORPUS_EXTRA):
        vendor, framework = pairs[(i * 3) % len(pairs)]
        images.append(_image(vendor, framework, 12, seed))
        seed += 2
    assert len(images) == CORPUS_SIZE
    return images


def balanced_subset(images, task: str, per_class: int):
    """First `per_class` images of each class, in corpus order."""
    taken: dict[str, int] = {}
    subset = []
    for img in images:
        label = img.label(task)
        if taken.get(label, 0) < per_class:
            taken[label] = taken.get(label, 0) + 1
            subset.append(img)
    return subset


@pytest.fixture(scope="session")
def vendor_model(corpus_images):
    """One vendor classifier for sweep/pipeline tests (not the CV run)."""
    subset = balanced_subset(corpus_images, "vendor", 40)
    return cnn_train(subset, "vendor",
                     hyper=Hyper(epochs=20, stop_at_val_accuracy=1.0),
                     seed=7)
