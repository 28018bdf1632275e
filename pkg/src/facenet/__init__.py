"""Multi-spectral (RGB / near-infrared / thermal-infrared) vehicle
re-identification with self-supervised flare mask prediction and
thermal-guided feature enhancement.

Subpackage map:

- ``data_model``    dataset sample types, manifest IO, P x K batch sampler
- ``flare_synth``   synthetic aligned triplet generator with flare injection
- ``pseudo_label``  bright-pixel statistic and flare pseudo-labels
- ``backbone``      per-spectrum convolutional encoders
- ``mfmp``          mutual flare mask prediction (FMI fusion + SMP classifier)
- ``fce``           flare-aware cross-modal enhancement
- ``losses``        identity CE, batch-hard triplet, inter-modality consistency
- ``evaluator``     mAP / CMC retrieval metrics with cross-camera filtering
- ``trainer``       training loop, configuration, checkpointing
- ``cli``           command-line entry points
"""

__version__ = "0.1.0"

SPECTRA = ("rgb", "ni", "ti")
FLARE_SPECTRA = ("rgb", "ni")
