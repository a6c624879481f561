"""catgen: causality-aware transformer diffusion for spatial gene expression.

Submodules are imported lazily by the CLI so thread environment variables can
be pinned before numpy loads; import the pieces you need directly, e.g.
``from catgen import diffusion, mask``.
"""

__version__ = "0.1.0"
