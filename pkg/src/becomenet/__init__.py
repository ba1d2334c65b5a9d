"""Multi-task facial action-unit detection with a beta-guided correlation loss.

Submodules: ``diffcomp`` (autodiff), ``specialfn`` (beta/t functions),
``betagraph`` (correlation screening and loss), ``network``, ``losses``,
``datapipe``, ``trainer``, ``validity``, ``animation`` and ``cli``.
"""

__version__ = "0.1.0"
