"""Copy-move forgery detection toolkit: synthetic tampering, block and keypoint
features, matching, post-processing and benchmark evaluation."""

__version__ = "0.1.0"
