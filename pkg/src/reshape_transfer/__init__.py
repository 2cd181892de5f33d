"""Respiratory-sound classification by reshaping 1 s audio windows into
square matrices, training a small CNN on them, and reusing its last pooling
layer as features for KNN, SVM and decision-tree classifiers."""

__version__ = "0.1.0"
