"""Desk-scale laboratory for knowledge-guided defenses against backdoor and
poisoning attacks on contrastively trained vision-language models."""

__version__ = "0.1.0"
