"""Block-parallel 2D Gaussian splatting with a shared, momentum-distilled decoder.

Modules: ``diffcore`` (autodiff and Adam), ``scene`` (synthetic scenes,
cameras, partitions, anchors), ``decoder``, ``renderer``, ``metrics``,
``weighting``, ``orchestrator`` (training, checkpoints, merge) and ``cli``.
"""

__version__ = "0.1.0"
