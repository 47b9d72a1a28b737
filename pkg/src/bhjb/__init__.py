"""Backward HJB solver on scenario trees with Monte-Carlo and density oracles."""
