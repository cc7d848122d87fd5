"""scikit-learn style wrapper.

A generative model has no ``transform``/``predict``; the estimator exposes
``fit(X[, y])``, ``sample(n)`` and ``score(X)`` (negative energy distance of
fresh samples to ``X``), with hyper-parameters managed by ``BaseEstimator``.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diffusion import NoiseSchedule, SamplerConfig, sample_network
from .harness.config import OptimizerConfig
from .harness.metrics import energy_distance
from .harness.train import train_network
from .networks import ImageSpaceConfig, LatentConfig, build_network
from .tensor import Rng, default_dtype
from .tensor.core import ContractError
from .validation import check_images, check_labels, check_positive_int


class DiffiTGenerator(BaseEstimator):
    """Train a DiffiT denoiser on an image array and draw samples from it.

    Parameters
    ----------
    family : {"image", "latent"}
        U-shaped image-space network or isotropic latent network.
    network_params : dict or None
        Extra fields for the network config (widths, windows, hidden, ...).
        Resolution and channels are taken from the data.
    schedule : {"VE", "VP"}
    steps, batch_size, lr : training budget and Adam step size.
    ema : bool
        Keep EMA weights and sample with them.
    sampler, sample_steps : sampler kind and number of steps.
    random_state : int
        Seeds initialisation, minibatches and diffusion noise.
    """

    def __init__(self, family="image", network_params=None, schedule="VE", steps=500, batch_size=32, lr=1e-3,
                 ema=False, sampler="heun_ode", sample_steps=18, random_state=0):
        self.family = family
        self.network_params = network_params
        self.schedule = schedule
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema = ema
        self.sampler = sampler
        self.sample_steps = sample_steps
        self.random_state = random_state

    def _network_config(self, shape, num_classes):
        res, _, chans = shape
        extra = dict(self.network_params or {})
        if self.family == "image":
            return ImageSpaceConfig(resolution=res, in_channels=chans, **extra)
        if self.family == "latent":
            return LatentConfig(resolution=res, channels=chans, num_classes=num_classes, **extra)
        raise ContractError(f"family must be 'image' or 'latent', got {self.family!r}")

    def fit(self, X, y=None):
        X = check_images(X)
        check_positive_int(self.steps, "steps")
        check_positive_int(self.batch_size, "batch_size")
        num_classes = 0
        if y is not None:
            if self.family != "latent":
                raise ContractError("class labels are supported by the latent family only")
            y = check_labels(y, X.shape[0])
            num_classes = int(y.max()) + 1
        cfg = self._network_config(X.shape[1:], num_classes)
        self.schedule_ = NoiseSchedule(self.schedule)
        opt = OptimizerConfig(lr=self.lr, batch_size=self.batch_size, steps=self.steps, ema=self.ema)
        with default_dtype(np.float32):
            net = build_network(cfg, Rng(self.random_state).spawn(2))
            result = train_network(net, X, y, self.schedule_, opt, seed=self.random_state)
        if result.ema is not None:
            net.load_state_dict(result.ema)
        self.network_ = net
        self.loss_curve_ = result.losses
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = X.shape[1:]
        self.n_classes_ = num_classes
        return self

    def sample(self, n_samples=16, random_state=None, label=None):
        check_is_fitted(self, "network_")
        n = check_positive_int(n_samples, "n_samples")
        seed = self.random_state if random_state is None else random_state
        if label is not None:
            if not self.n_classes_:
                raise ContractError("estimator was fitted without labels")
            label = np.full(n, int(label))
        cfg = SamplerConfig(self.sampler, self.sample_steps, seed=seed)
        return sample_network(self.network_, n, self.schedule_, cfg, label=label)

    def score(self, X, y=None):
        """Negative energy distance between ``len(X)`` fresh samples and ``X``."""
        X = check_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ContractError(f"X has image shape {X.shape[1:]}, fitted on {self.image_shape_}")
        return -energy_distance(self.sample(X.shape[0]), X)

    def get_config(self) -> dict:
        """Network and schedule configuration of the fitted model."""
        check_is_fitted(self, "network_")
        return {"network": asdict(self.network_.config), "schedule": asdict(self.schedule_)}
