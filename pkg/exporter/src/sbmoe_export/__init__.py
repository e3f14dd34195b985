"""Offline text-to-embedding exporter for the sbmoe toolkit.

Encodes ``id<TAB>text`` collections with a pretrained transformer encoder
and writes the vectors to SBMV stores, the binary format the retrieval
toolkit reads.
"""

__version__ = "0.1.0"
