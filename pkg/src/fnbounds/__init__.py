"""fnbounds: evaluation and black-box attack toolkit for function boundary
detectors.

The package covers the full loop: corpus production (synthetic generator and
real compiler drivers), byte-level ground truth, detectors under test,
precision/recall scoring, misclassification heavy-hitter mining,
length-preserving NOP-pad injection, and the unguided adversarial search
with validation and retraining.
"""

__version__ = "0.1.0"
