"""Fair classifier training across data silos under a federated equal-opportunity constraint."""

__version__ = "0.1.0"
