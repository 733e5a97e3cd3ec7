"""
Online fine-tuning of diffusion samplers under a feedback budget
"""

__version__ = "0.1.0"
