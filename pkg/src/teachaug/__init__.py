"""TeachAugment: teacher-constrained adversarial augmentation, at desk scale."""

__version__ = "0.1.0"
