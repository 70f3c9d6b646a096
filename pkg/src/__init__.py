"""Masked AutoEncoder Purifier: adversarial purification with a masked autoencoder"""
__version__ = "0.1.0"
