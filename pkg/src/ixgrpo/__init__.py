"""Judge-guided GRPO fine-tuning of a small conditional rectified-flow
intrinsic decomposition model on procedural Lambertian scenes."""

__version__ = "0.1.0"
