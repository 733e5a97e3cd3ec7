"""
Test suite for diffusion online fine-tuning
"""
