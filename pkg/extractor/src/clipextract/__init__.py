"""Bridge from raw NYU/KITTI-style images to the depth head's interchange
formats: runs a frozen pretrained CLIP ViT-L/14@336px (or a deterministic
seeded stand-in), exports pre-aggregation patch tokens plus CLS as PCEB, and
builds text-phrase depth-table initializations as PCTB."""

from . import cli, encoders, formats, jobs

__version__ = "0.1.0"

__all__ = ["cli", "encoders", "formats", "jobs"]
