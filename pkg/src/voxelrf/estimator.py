"""Estimator-style facade so reconstruction composes like a fit/predict model.

``SparseViewReconstructor`` follows the scikit-learn parameter conventions
(constructor stores hyperparameters verbatim, ``get_params``/``set_params``,
trailing-underscore attributes for fitted state) without depending on
scikit-learn itself.
"""

from __future__ import annotations

import numpy as np

from .datasets import Dataset
from .errors import InvalidParameterError
from .metrics import evaluate_images
from .rendering import RenderConfig, render_image
from .training import TrainConfig, preset, train_pipeline


def check_dataset(dataset) -> Dataset:
    if not isinstance(dataset, Dataset):
        raise InvalidParameterError(
            f"expected a Dataset, got {type(dataset).__name__}")
    for im in dataset.images:
        arr = np.asarray(im)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InvalidParameterError("images must be (H, W, 3) arrays")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidParameterError("image values must lie in [0, 1]")
    return dataset


class SparseViewReconstructor:
    """Fits a voxel radiance field to posed images; predicts novel views.

    Parameters
    ----------
    config : preset name or TrainConfig. Mutated copies are made at fit time.
    seed : overrides the config seed when not None.
    """

    def __init__(self, config="toy", seed=None):
        self.config = config
        self.seed = seed

    # -- sklearn-style parameter plumbing
    def get_params(self, deep=True):
        return {"config": self.config, "seed": self.seed}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in self.get_params():
                raise InvalidParameterError(
                    f"unknown parameter {key!r} for SparseViewReconstructor")
            setattr(self, key, value)
        return self

    def _resolved_config(self) -> TrainConfig:
        cfg = preset(self.config) if isinstance(self.config, str) \
            else TrainConfig.from_dict(self.config.to_dict())
        if self.seed is not None:
            cfg.seed = self.seed
        return cfg

    def fit(self, dataset: Dataset):
        """Train on the dataset's train split; returns self."""
        check_dataset(dataset)
        cfg = self._resolved_config()
        self.config_ = cfg
        self.field_, self.history_ = train_pipeline(dataset, cfg)
        self.render_config_ = RenderConfig(
            background=np.asarray(cfg.background, dtype=np.float64),
            depth_mode=cfg.depth_mode,
            use_ndc=cfg.scene_type == "forward",
            shard_size=cfg.shard_size)
        return self

    def _require_fitted(self):
        if not hasattr(self, "field_"):
            raise InvalidParameterError(
                "this reconstructor is not fitted yet; call fit first")

    def predict(self, cameras, with_depth=False):
        """Render the fitted field from the given cameras."""
        self._require_fitted()
        renders = [render_image(self.field_, cam, self.render_config_)
                   for cam in cameras]
        if with_depth:
            return renders
        return [color for color, _ in renders]

    def score(self, dataset: Dataset, split="test") -> float:
        """Mean PSNR over the given split."""
        self._require_fitted()
        check_dataset(dataset)
        idx = dataset.indices(split)
        if not idx:
            raise InvalidParameterError(f"dataset has no {split!r} views")
        rendered = self.predict([dataset.cameras[i] for i in idx])
        report = evaluate_images(rendered, [dataset.images[i] for i in idx])
        return report.mean_psnr
