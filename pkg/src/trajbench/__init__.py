"""Direct-transcription benchmark toolkit for rigid multibody optimal control.

The package compares five transcriptions of torque-driven multibody optimal
control problems — explicit and implicit multiple shooting and direct
collocation, the implicit families in forward- and inverse-dynamics form —
on top of shared recursive dynamics kernels, a collocation polynomial basis,
fixed-step integrators, and a built-in sequential quadratic programming
solver.
"""

__version__ = "0.1.0"
