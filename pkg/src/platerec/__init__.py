"""Image-based personalized restaurant recommendation.

A convolutional autoencoder is trained as an image feature extractor and a
triad classifier predicts like/dislike for (user, restaurant, image)
triples, with constraint-aware dataset splitting, minority-class
augmentation and balanced-score-monitored training.
"""

from . import cae, data, harness, metrics, nn, recmodel

__all__ = ["cae", "data", "harness", "metrics", "nn", "recmodel"]
