"""Grouped time-mixing MLP video networks.

Submodules are imported explicitly (``from gtmnet import tensor, gtm, ...``);
the package root stays import-light so the CLI can configure BLAS thread
limits before numpy loads.
"""

__version__ = "0.1.0"
