"""Immunogenicity prediction from sequence embeddings, structure tokens and
physicochemical descriptors."""

__version__ = "0.1.0"
