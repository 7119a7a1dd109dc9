"""Category-level object pose and size estimation by learning a canonical shape space.

Modules: ``tensorcore`` (autodiff and Adam), ``geom3d`` (poses, metrics),
``shapegen`` (synthetic data), ``nets`` (encoders, decoder, pose head),
``train`` (losses and the three-stage schedule), ``evalkit`` (metrics,
curves, probes) and ``cli``.
"""

__version__ = "0.1.0"
