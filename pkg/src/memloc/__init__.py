"""Neuron-level localization of memorized sequences in a from-scratch byte-level transformer."""

from .lm import ModelConfig, NeuronId, Sequence, TransformerLM, apply_neuron_dropout
from .locate import METHODS, AttributionMap, localize, select_topk

__version__ = "0.1.0"

__all__ = ["ModelConfig", "NeuronId", "Sequence", "TransformerLM", "apply_neuron_dropout", "METHODS",
           "AttributionMap", "localize", "select_topk", "__version__"]
