"""Enrich a small domain knowledge graph by linking it to a general one.

The toolkit covers triple I/O, benchmark subsampling, label-based entity
representations, nearest-neighbour alignment and linking, a RotatE model
trained with a distance-weighted self-adversarial loss, and filtered ranking
evaluation.
"""

__version__ = "0.1.0"
