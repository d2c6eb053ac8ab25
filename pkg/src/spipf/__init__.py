"""Salted path integral particle filtering for hybrid stochastic systems."""
