"""File-based pipeline: synthetic data, staged training, inference, scoring."""
