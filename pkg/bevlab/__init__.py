"""Toy BEV multimodal 3D detection lab: contrastive distillation, linear-attention fusion and scene augmentation."""

__version__ = "0.1.0"
