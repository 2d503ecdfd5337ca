"""Differentially private gossip averaging and decentralized optimization with exact pairwise privacy accounting."""
