"""Graph-based discrete-choice simulation."""
