"""Self-supervised pretraining for point cloud sequences.

Segments of a dynamic point cloud are encoded with a decoupled
spatial/temporal convolution, a transformer predicts the final segment's
embeddings from the earlier ones, and training combines local and global
InfoNCE objectives with a colorized chamfer reconstruction of the target
segment.
"""

__version__ = "0.1.0"
