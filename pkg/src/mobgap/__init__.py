"""Mobility-gap analysis between low-income and other households.

Pipeline pieces: income thresholds (:mod:`mobgap.income`), survey ingest and
feature derivation (:mod:`mobgap.survey`), synthetic fixtures
(:mod:`mobgap.synth`), K-prototypes clustering (:mod:`mobgap.kprototypes`),
gap statistics (:mod:`mobgap.gaps`) and the command line (:mod:`mobgap.cli`).
"""

__version__ = "0.1.0"
