"""Dataset loading, checkpoints, image files and procedural toy scenes."""

from texgs.io.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from texgs.io.dataset import Dataset, DatasetError, load_dataset
from texgs.io.images import read_image, write_image
from texgs.io.toy import TOY_GENERATORS, make_toy_scene

__all__ = [
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "Dataset", "DatasetError", "load_dataset",
    "read_image", "write_image",
    "TOY_GENERATORS", "make_toy_scene",
]
