"""Diverse temporal grounding from single positive labels, at desk scale."""

from .estimator import DTGSPL, EpochLog
from .lattice import ProposalSet, build_lattice
from .synth import SynthConfig, gen_dataset
from .temporal import CenterWidth, Interval, iou

__all__ = [
    "DTGSPL", "EpochLog", "ProposalSet", "build_lattice", "SynthConfig", "gen_dataset",
    "CenterWidth", "Interval", "iou",
]
__version__ = "0.1.0"
