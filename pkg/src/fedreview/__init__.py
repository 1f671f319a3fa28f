"""Federated LoRA fine-tuning of a toy transformer on three code-review tasks."""

__version__ = "0.1.0"
