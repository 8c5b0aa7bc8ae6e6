"""OCT B-scan speckle reduction: phantoms, registration, self-fusion,
pseudo-modality fusion networks and image-quality metrics.
"""

from .errors import (DegenerateInputError, NonFiniteError, PMFNError, StageDependencyError,
                     TrainingDiverged, ValidationError)

__version__ = "0.1.0"
