# Core modules for reinforced tree walk experiments

__version__ = "0.1.0"
