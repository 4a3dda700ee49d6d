"""Domain-adaptive object detection on a synthetic two-domain shapes benchmark.

A small two-stage detector is trained on a labeled source domain and adapted
to an unlabeled target domain with a mean-teacher detector pair plus a bank
of per-class binary domain classifiers aligned adversarially through a
gradient reversal layer.
"""

__version__ = "0.1.0"
