"""In-context segmentation at desk scale: one reference image plus masks in,
ID, instance and semantic segmentations of a target image out."""

__version__ = "0.1.0"
