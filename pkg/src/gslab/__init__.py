"""gslab: a small laboratory for studying GAN conditioning on 2-D mixtures.

The package is organized bottom-up:

``autodiff``
    reverse-mode automatic differentiation on numpy arrays
``spectral``
    power/subspace iteration, spectral normalization, clamping and the
    spectral regularizers
``latent``, ``data``
    latent samplers (including truncation) and Gaussian-mixture datasets
``network``, ``training``
    conditional generator/discriminator and the alternating update loop
``telemetry``, ``evaluation``, ``checkpoint``
    spectra logging, collapse detection, sample-quality metrics, state files
``config``, ``run``, ``cli``
    flat run configs, orchestration and the ``gslab`` command
"""

from .autodiff import Tensor, grad, no_grad
from .config import RunConfig, load as load_config, loads as loads_config
from .training import TrainState, train_step

__all__ = ["Tensor", "grad", "no_grad", "RunConfig", "load_config", "loads_config", "TrainState", "train_step"]
__version__ = "0.1.0"
