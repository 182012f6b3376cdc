"""Noise-perturbed log-odds test for detecting and correcting adversarial examples."""
__version__ = "0.1.0"
