"""Active BEV query selection for multi-agent camera perception.

Cars carrying pinhole cameras share a bird's-eye-view workspace: each
ego agent encodes a BEV feature grid with deformable attention over its
own and its partners' camera features, a learned interest score gates
which (query, camera) pairs are worth fetching from partners, and a
light detection head turns the grid into boxes. Everything runs on
synthetic scenes small enough for a desk CPU.
"""

__version__ = "0.1.0"
