"""Deterministic federated-learning simulator with backdoor insertion and
adversarial backdoor removal via importance-weighted unlearning."""

__version__ = "0.1.0"
