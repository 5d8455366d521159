"""Weakly supervised semantic segmentation for event cameras.

Subpackages and modules:

* ``evseg.kernels``     -- hot numeric kernels (numba-jitted with a pure-numpy
                           fallback, selected via the EVSEG_BACKEND env var)
* ``evseg.events``      -- event streams, windowing, reversal, voxel grids
* ``evseg.synth``       -- synthetic event-scene simulator and label corruption
* ``evseg.network``     -- recurrent encoder / decoder / projection pair with
                           hand-rolled backprop
* ``evseg.supervision`` -- point-label loss, reliability, pseudo labels, dual loss
* ``evseg.prototypes``  -- class prototype banks, contrastive and distill losses
* ``evseg.trainer``     -- dual-student training loop, RAdam, checkpoints
* ``evseg.evaluator``   -- confusion / mIoU metrics and the ablation harness
* ``evseg.annotate``    -- local HTTP annotation backend
* ``evseg.cli``         -- command line entry points
"""

__version__ = "0.1.0"
