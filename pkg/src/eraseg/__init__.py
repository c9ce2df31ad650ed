"""Semi-supervised knee-slice segmentation sandbox.

Synthetic phantoms, edge replacement augmentation, a small hand-backpropagated
convolutional segmenter with mean-teacher training, prototype consistency
alignment, and two-stage conditional self-training, plus surface-distance
metrics and a deterministic experiment runner.
"""

__version__ = "0.1.0"
