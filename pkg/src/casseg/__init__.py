"""Clustering-augmented self-supervised pretraining for few-shot segmentation."""

__version__ = "0.1.0"
