"""Conversation modeling with GRU encoder-decoders and attention.

Submodules: ``tensor`` (tape-based autodiff core), ``corpus`` (tokenization,
vocabularies, fragments, batches), ``model`` (flat and hierarchical
architectures), ``trainer`` (SGD loop), ``evaluate`` (perplexity, greedy
generation, context-size sweeps), ``markers`` (discourse-marker analysis),
``checkpoint`` (binary model files) and ``cli`` (command line entry point).
"""

__version__ = "0.1.0"
