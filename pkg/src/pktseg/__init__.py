"""Pocket U-Net segmentation of post-operative glioblastoma GTVs from multi-sequence MRI.

Subpackages and modules: ``volume_io`` (raw volumes and manifests), ``preprocess``
(normalization, resampling, patches, sliding windows), ``nn`` (NumPy autodiff
engine), ``architectures`` (Pocket / Double U-Nets, ensembles, checkpoints),
``metrics`` (Dice, HD95, FPE, FNE, Wilcoxon), ``phantom`` (synthetic studies)
and ``harness`` (cross-validation, ablation grid, CLI).
"""
__version__ = "0.1.0"
