"""Multi-view 3D shape representation learning at desk scale.

Pipeline: parse or synthesize meshes, render 12 views per shape with a
software rasterizer, pretrain a small encoder with a contrastive objective,
then evaluate frozen embeddings via linear probe, k-NN, and cosine retrieval.
"""

__version__ = "0.1.0"
