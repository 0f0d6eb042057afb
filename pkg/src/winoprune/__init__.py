"""Sparse Winograd convolution and two-phase spatial/Winograd pruning.

Submodules (import directly; the package root stays import-light so the
CLI can pin threading before numpy loads):

    transforms   Cook-Toom transform matrices and coefficient tensors
    conv         direct / dense Winograd / sparse Winograd convolution
    nn           minimal training engine (layers, SGD, masks)
    pruning      two-phase pruning driver and scoring primitives
    data         CIFAR-10 binary loader and synthetic datasets
    checkpoint   bit-exact binary persistence
    cli          command-line lifecycle drivers
"""

__version__ = "0.1.0"
