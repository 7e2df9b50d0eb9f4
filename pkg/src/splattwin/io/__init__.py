"""Scene input/output: COLMAP text models, PLY clouds, images and masks."""
from .colmap import (ImagePose, Intrinsics, SparseModel, format_colmap_texts, parse_cameras_text,
                     parse_colmap_text, parse_colmap_texts, parse_images_text, parse_points_text,
                     write_colmap_text)
from .images import (load_image, load_label_mask, load_mask, save_image, save_label_mask,
                     save_mask)
from .ply import read_ply, write_ply

__all__ = [
    "ImagePose", "Intrinsics", "SparseModel", "format_colmap_texts", "parse_cameras_text",
    "parse_colmap_text", "parse_colmap_texts", "parse_images_text", "parse_points_text",
    "write_colmap_text", "load_image", "load_label_mask", "load_mask", "save_image",
    "save_label_mask", "save_mask", "read_ply", "write_ply",
]
