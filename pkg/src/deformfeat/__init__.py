"""Keypoint detection and sparse deformable description with a small CNN.

Submodules: ``geometry``, ``numerics``, ``backbone``, ``dkd``, ``descriptors``,
``losses``, ``complexity``, ``evalbench``, ``model`` and ``harness``.
"""

__version__ = "0.1.0"
