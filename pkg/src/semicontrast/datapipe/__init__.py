from .augment import AugmentationPolicy, augment, sample_rng, two_view
from .folders import (
    Sample,
    load_classification_folder,
    load_segmentation_folder,
    load_unlabeled_folder,
    write_classification_folder,
    write_segmentation_folder,
    write_unlabeled_folder,
)
from .labels import label_downsample
from .sampling import class_balanced_batch
from .split import AI4MARS_SPLIT, MSL_SPLIT, ChronoSplit, chrono_split
from .synth import SynthDataset, SynthSpec, synth_toy_dataset
