"""Deterministic simulator for attaching integrated devices to confidential
realm VMs with memory and interrupt isolation."""

__version__ = "0.1.0"
