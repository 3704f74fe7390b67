"""Energy-based classifier toolkit.

Training (cross-entropy, SGLD-based generative baseline, and the
non-generative input-gradient penalty) plus the evaluation battery:
calibration, out-of-distribution scoring, and PGD adversarial attacks.
"""

__version__ = "0.1.0"
