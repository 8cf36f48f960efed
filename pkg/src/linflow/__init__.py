"""linflow: post-hoc conversion of softmax attention to linear attention
in small rectified-flow sequence models, without access to training data."""

__version__ = "0.1.0"
