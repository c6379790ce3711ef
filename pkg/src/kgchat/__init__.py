"""Knowledge-graph grounded dialogue generation.

A small research codebase: a float64 numeric kernel with a recorded-op
gradient tape, a knowledge-graph toolbox (k-shortest paths, per-turn
subgraph sampling, perturbation protocols), a corpus pipeline, a
Seq2Seq dialogue model whose decoder can walk the graph to emit
entities, evaluation metrics, and a command line front end.
"""

__version__ = "0.1.0"
