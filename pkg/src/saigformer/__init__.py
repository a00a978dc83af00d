"""Low-light image enhancement with a summed-area-table illumination estimator
and an illumination-guided channel-attention U-shaped transformer, built on a
small numpy autograd engine."""

__version__ = "0.1.0"
