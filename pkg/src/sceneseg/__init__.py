"""Desk-scale 3D point-cloud instance segmentation with a query-based decoder.

Synthetic indoor scenes, a voxel encoder-decoder backbone, dual local/global
feature branches, a parallel-fusion masked-attention decoder, Hungarian-matched
training, and an NMS-free ranked inference path with a mAP evaluator.
"""

__version__ = "0.1.0"
