"""Bowel-sound (peristalsis) detection: MFCC windows, a small 1D CNN and a
Laplace-emission hidden semi-Markov refiner."""

__version__ = "0.1.0"

NP, P = 0, 1
LABEL_NAMES = ("NP", "P")
