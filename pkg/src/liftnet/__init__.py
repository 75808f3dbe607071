"""Lifted neural networks: block operators, proximal activations, lifted training and inversion."""
