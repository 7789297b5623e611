"""Learned local 3D geometry descriptors.

Surface neighborhoods become truncated-distance voxel patches
(:mod:`tdfmatch.tdf`), a small 3D ConvNet maps patches to descriptors
(:mod:`tdfmatch.net`) trained on pairs mined from posed depth frames
(:mod:`tdfmatch.sampling`), and descriptor matches drive RANSAC rigid
registration (:mod:`tdfmatch.registration`), scored by
:mod:`tdfmatch.evaluation`.
"""

__version__ = "0.1.0"
