"""Serverless functions on the idle fragments of batch-managed cluster nodes.

Kept import-light on purpose: sandbox processes import this package at
startup and every import here is paid on each cold start.
"""

__version__ = "0.1.0"
