"""cdqag-forge: change-detection question answering and grounding toolkit.

Generates {question, answer, mask} triplets from semantic mask pairs,
scores textual+visual predictions (AA/OA, mIoU/oIoU), and ships a small
numerically verified forward model with analytic-gradient losses.
"""

__version__ = "0.1.0"
