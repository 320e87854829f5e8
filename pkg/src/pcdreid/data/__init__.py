from .augment import AugmentConfig, augment, image_rng
from .dataset import (DatasetSplit, ImageRecord, format_filename, parse_filename,
                      scan_dataset, synth_dataset)
from .io import read_ppm, resize, write_ppm
from .sampler import PKBatch, pk_sample

__all__ = [
    "AugmentConfig", "augment", "image_rng", "DatasetSplit", "ImageRecord",
    "format_filename", "parse_filename", "scan_dataset", "synth_dataset",
    "read_ppm", "resize", "write_ppm", "PKBatch", "pk_sample",
]
