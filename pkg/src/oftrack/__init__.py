"""Data-driven output-feedback optimal tracking for discrete-time LTI plants.

Modules:

* :mod:`oftrack.linalg_kit`: vectorization, Stein/Sylvester solvers, rank tests
* :mod:`oftrack.lti_core`: plant, exosystem, internal model and augmented system
* :mod:`oftrack.regulation_oracle`: model-based ground truth (Hewer iteration, regulator equations)
* :mod:`oftrack.state_reconstruction`: filter banks and the parameterization matrix
* :mod:`oftrack.offpolicy_rl`: the model-free learner and deployment loop
* :mod:`oftrack.cli`: experiment runner
"""

__version__ = "0.1.0"
