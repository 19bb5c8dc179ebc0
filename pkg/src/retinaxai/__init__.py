"""Grad-CAM explanations and quadrant lesion reports for retinal images.

Modules, bottom up: ``tensor`` (kernels), ``net`` (small CNN with a tapped
conv layer), ``gradcam``, ``detector`` (anchors, deltas, loss, NMS), ``fewshot``
(prototype typing), ``report`` (quadrants), ``synth`` / ``fit`` / ``evaluate``
(synthetic scenes, head fitting, sensitivity), ``io`` and ``cli``.
"""

__version__ = "0.1.0"
