"""
Guitar tablature transcription with continuous pitch-deviation contours.

Modules: ``features`` (HCQT/CQT), ``dataset`` (annotations, grouping, targets,
folds, synthetic fixtures), ``model``, ``objectives`` (losses incl. the
continuous Bernoulli deviation loss), ``decoding``, ``evaluation``,
``training`` (cross-validation harness) and ``cli``.
"""

__version__ = "0.1.0"
