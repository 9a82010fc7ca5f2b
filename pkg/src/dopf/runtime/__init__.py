"""Aggregator/agent deployment: wire format, transports and services."""
