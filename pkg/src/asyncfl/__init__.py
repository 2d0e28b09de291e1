"""Asynchronous federated learning simulator with bound-verification tooling."""

__version__ = "0.1.0"
