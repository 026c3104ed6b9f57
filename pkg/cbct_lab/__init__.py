"""
Cone-beam CT laboratory.

Scanning geometry, DRR forward projection, FDK/SART baselines and a desk-scale
geometry-aware encoder/decoder trained with voxel, gradient and projection losses.
"""

__version__ = "0.1.0"
