"""
Granular Tails Backend Package

Moment inequalities, interval moment propagation and DSMC tail measurement
for forced inelastic hard spheres.
"""

__version__ = "0.1.0"
__author__ = "Granular Tails Team"
__license__ = "MIT"
