"""Image-report contrastive pre-training lab.

Trains a pair of small encoders on a synthetic paired corpus with three
objectives: a global image-report contrastive loss, a local attentive
contrastive loss over image sub-regions and words, and a report
perturbation sensitivity loss whose negatives are rule-based rewrites of
the paired report. Ships the perturbation engine, the training loop, and
the ranking/retrieval/probe evaluation harnesses behind one CLI.
"""

__version__ = "0.1.0"
