"""Palette representation toolkit: CIELAB color tokens, palette extraction,
a masked color model with optional cross-attention conditioning, and
palette/image color metrics."""

__version__ = "0.1.0"

from .color import LabColor, Palette, SrgbColor, dequantize, lab_to_srgb, quantize, srgb_to_lab
from .extract import ImageBuffer, extract_palette, kmeans_lab, load_image, to_grayscale
from .metrics import bhattacharyya_distance, color_histogram, dccw, psnr, ssim

__all__ = [
    "ImageBuffer",
    "LabColor",
    "Palette",
    "SrgbColor",
    "bhattacharyya_distance",
    "color_histogram",
    "dccw",
    "dequantize",
    "extract_palette",
    "kmeans_lab",
    "lab_to_srgb",
    "load_image",
    "psnr",
    "quantize",
    "srgb_to_lab",
    "ssim",
    "to_grayscale",
]
