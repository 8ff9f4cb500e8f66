"""Integral-histogram based moving object detection and tracking.

Submodules:

- :mod:`spct.imagecore` -- image containers, quantization, PGM/PPM IO
- :mod:`spct.integral` -- integral histogram tensors and scan schedules
- :mod:`spct.swih` -- exact spatially weighted local histograms
- :mod:`spct.features` -- feature bank and pyramid HoG
- :mod:`spct.likelihood` -- likelihood maps, fusion and scoring
- :mod:`spct.motion` -- median / flux-tensor motion detection, depth fusion, GAC
- :mod:`spct.tracker` -- Kalman filter, CAMSHIFT refinement, SPCT tracking loop
- :mod:`spct.evaluation` -- tracking and detection evaluation measures
- :mod:`spct.pipeline` -- double-buffered sequence pipeline
- :mod:`spct.fixtures` -- synthetic scenes with known ground truth
- :mod:`spct.cli` -- the ``spct`` command line

Compiled kernels use numba when it is available; set ``SPCT_NUMBA=0`` to run
the pure-numpy fallbacks instead.
"""

from spct.errors import CapacityError, ContractError, ImageFormatError, SpctError
from spct.imagecore import BinMap, Rect

__version__ = "0.1.0"

__all__ = [
    "BinMap",
    "CapacityError",
    "ContractError",
    "ImageFormatError",
    "Rect",
    "SpctError",
    "__version__",
]
