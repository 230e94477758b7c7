"""Offline writer identification pipeline.

Local descriptors are activation features of a small CNN trained on
contour-centered handwriting patches. Per document they are aggregated
into a GMM supervector (mean-only MAP adaptation, KL-kernel
normalization) and retrieved by cosine distance.
"""

__version__ = "0.1.0"
