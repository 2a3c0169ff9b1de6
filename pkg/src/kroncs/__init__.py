"""L1 phase transitions for compressed sensing with Kronecker-correlated matrices."""

__version__ = "0.1.0"
