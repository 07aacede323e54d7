"""Data, training, checkpoints and the command line."""
