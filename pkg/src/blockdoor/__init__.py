"""Backdoor attacks on small ViTs and CNNs, interpretation-map trigger
localization, and the heatmap-argmax blocking defense."""

__version__ = "0.1.0"
