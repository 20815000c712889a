from .coco import load_corpus, rle_decode, rle_encode, save_corpus
from .sampling import (
    build_finetune_set,
    build_test_tasks,
    crop_support_patch,
    finetune_size,
    resize_support,
    sample_training_episode,
    select_novel_support,
)
from .shapes import SHAPES, ShapesConfig, generate_shapes_corpus, mask_to_box, rasterize_shape
from .types import AnnotationIndex, DatasetError, Episode, InstanceAnnotation, SupportInstance

__all__ = [
    "AnnotationIndex", "DatasetError", "Episode", "InstanceAnnotation", "SupportInstance",
    "SHAPES", "ShapesConfig", "generate_shapes_corpus", "rasterize_shape", "mask_to_box",
    "load_corpus", "save_corpus", "rle_encode", "rle_decode",
    "crop_support_patch", "resize_support", "sample_training_episode", "build_test_tasks",
    "build_finetune_set", "select_novel_support", "finetune_size",
]
