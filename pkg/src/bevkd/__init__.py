"""Desk-scale camera-to-BEV perception with teacher-student distillation.

Submodules:

- ``diffcore``: parameters, errors, forward/backward driver, gradient oracle
- ``geometry``: cameras, depth bins, BEV grid, lift-splat pooling
- ``nets``: backbone, task heads, decoding, checkpoints
- ``distill``: alignment losses, region masks, the combined objective
- ``synthworld``: scenes, rendering, labels, the teacher output cache
- ``trainer``: supervised loss, AdamW, schedule, variant training
- ``metrics``: mAP, displacement errors, collision rate, reports
- ``config``/``cli``: experiment configuration and the command-line runner
"""

__version__ = "0.1.0"
