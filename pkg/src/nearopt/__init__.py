"""Near-optimality of smooth feedback policies for controlled diffusions."""

__version__ = "0.1.0"
