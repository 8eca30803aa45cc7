"""modapt: train a multi-label recognition adapter on text embeddings and
transfer it zero-shot to image embeddings that live in the same space.

The pipeline has three stages: generate labeled training texts from a label
vocabulary, train a small feed-forward adapter on (noise-perturbed) text
embeddings, then score image embeddings with the frozen adapter. Hypersphere
noise injected during training lets the adapter cover image embeddings that
sit near, but not on, the text embeddings of the same labels.
"""

__version__ = "0.1.0"
