"""Bundled ontologies and run configurations."""
