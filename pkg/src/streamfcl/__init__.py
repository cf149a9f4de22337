"""Federated contrastive learning from unlabeled, temporally correlated streams.

Simulated clients keep a small replay buffer filled by a coreset selection
policy, train a Siamese contrastive model on it, and a server averages their
online networks every round.
"""
__version__ = "0.1.0"
