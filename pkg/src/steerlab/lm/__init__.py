"""Toy decoder-only transformer, game vocabulary, synthetic corpus and training loop."""
