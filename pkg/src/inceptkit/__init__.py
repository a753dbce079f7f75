"""Inception-style networks on a small numpy framework.

Modules: ``tensor`` (arrays and seeded RNG), ``nnops`` (kernels), ``graph``
(shape-checked graph with reverse-mode gradients), ``blocks`` and ``banks``
(declarative architectures), ``analysis`` (cost, receptive fields, lint),
``rewrite`` (factorisation passes), ``train`` and ``cli``.
"""

from .blocks import ArchSpec, AuxHeadSpec, BranchSpec, ConvLayer, InceptionModuleSpec, PoolLayer, build_network
from .graph import Graph, GraphError, ShapeError

__version__ = "0.1.0"

__all__ = ["ArchSpec", "AuxHeadSpec", "BranchSpec", "ConvLayer", "InceptionModuleSpec", "PoolLayer",
           "build_network", "Graph", "GraphError", "ShapeError"]
