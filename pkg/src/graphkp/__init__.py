"""graphkp: few-shot keypoint localization with predicted weighted skeleton graphs."""

__version__ = "0.1.0"
