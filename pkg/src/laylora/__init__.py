"""Asymmetric multi-branch low-rank adapters for expert-to-lay text generation.

Everything runs on a small numpy autodiff engine (:mod:`laylora.autodiff`);
the estimator front ends are :class:`laylora.estimator.LayStyleAdapter`,
:class:`laylora.probing.SemanticLayerSelector` and :class:`laylora.probing.LinearProbe`.
"""

__version__ = "0.1.0"
