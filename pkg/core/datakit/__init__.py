#!/usr/bin/env python3
"""
DistillForge Data Kit
"""

from .dataset import (
    ChannelLayout,
    Dataset,
    ToySpec,
    denormalize,
    make_toy_dataset,
    make_toy_split,
    normalize,
)

__all__ = [
    'ChannelLayout', 'Dataset', 'ToySpec',
    'make_toy_dataset', 'make_toy_split', 'normalize', 'denormalize',
]
