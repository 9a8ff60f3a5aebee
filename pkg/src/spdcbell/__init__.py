"""Simulation and analysis toolkit for a polarization-entangled SPDC Bell test.

polcore   two-photon polarization states and half-wave-plate analyzers
source    pair, walkoff and fluorescence generation
bench     beam splitter, analyzers, detectors and coincidence logic
analysis  sinusoid fits, CHSH estimation and convention calibration
cli       command-line front end
"""

__version__ = "0.1.0"
