"""uqsr: volumetric super-resolution with decomposed uncertainty maps.

Patch-wise convolutional regressors with a heteroscedastic noise model
and variational-dropout Bayesian convolutions; inference produces
high-resolution volumes plus voxel-wise intrinsic/parameter uncertainty
maps and risk masks.
"""

__version__ = "0.1.0"
