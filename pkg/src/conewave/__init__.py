"""Diffractive geodesics on flat cone surfaces and a finite-difference wave solver to test them."""

__version__ = "0.1.0"
