"""Learned grid-cell weights for allocating regional demand totals to facilities.

A heterogeneous graph (regions as sources, grid cells as agents) is encoded
with typed multi-head attention; a gated embedding distance and a per-region
softmax give cell weights, trained by matching regional indicator shares.
The weights then drive Voronoi and cluster-induced Voronoi allocation.
"""

__version__ = "0.1.0"
