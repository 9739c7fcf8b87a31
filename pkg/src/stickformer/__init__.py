"""stickformer: a desk-scale multi-task perception stack for stick-figure scenes.

Joint human-figure detection, pose estimation and instance segmentation with
a query-based transformer decoder, trained end to end on procedurally
generated scenes with exact analytic ground truth.
"""

__version__ = "0.1.0"

from .autograd import Tape, Tensor, parameter  # noqa: F401
