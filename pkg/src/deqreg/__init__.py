"""deqreg: equilibrium-layer networks with Jacobian-norm regularization."""

__version__ = "0.1.0"
