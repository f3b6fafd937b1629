"""cvit: chest X-ray diagnosis and six-zone severity quantification.

A small CNN pretrained on common radiographic findings supplies a spatial
feature corpus to a transformer encoder; a classification head reads the
class token, and a severity branch turns the remaining tokens into a
pixel severity map pooled per lung zone.
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward, grad_check  # noqa: F401
