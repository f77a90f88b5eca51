"""Age-of-Loop co-simulation of a wireless cart-pole control loop."""

__version__ = "0.1.0"
