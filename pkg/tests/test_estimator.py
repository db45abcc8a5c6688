"""The fit/predict facade around the training pipeline."""

import numpy as np
import pytest

from test_training import tiny_stage
from voxelrf.errors import InvalidParameterError
from voxelrf.estimator import SparseViewReconstructor, check_dataset
from voxelrf.training import TrainConfig


@pytest.fixture(scope="module")
def fitted(small_toy_dataset):
    cfg = TrainConfig(stages=[tiny_stage(iterations=120, batch_rays=512)],
                      seed=0)
    model = SparseViewReconstructor(config=cfg)
    return model.fit(small_toy_dataset)


class TestParams:
    def test_get_set_round_trip(self):
        model = SparseViewReconstructor(config="toy", seed=3)
        assert model.get_params() == {"config": "toy", "seed": 3}
        model.set_params(seed=9)
        assert model.seed == 9

    def test_unknown_parameter_rejected(self):
        with pytest.raises(InvalidParameterError, match="unknown parameter"):
            SparseViewReconstructor().set_params(batch_size=4)

    def test_seed_overrides_config(self):
        model = SparseViewReconstructor(config="toy", seed=77)
        assert model._resolved_config().seed == 77


class TestFitPredict:
    def test_unfitted_predict_raises(self, small_toy_dataset):
        model = SparseViewReconstructor()
        with pytest.raises(InvalidParameterError, match="not fitted"):
            model.predict([small_toy_dataset.cameras[0]])

    def test_predict_shapes(self, fitted, small_toy_dataset):
        cams = [small_toy_dataset.cameras[i]
                for i in small_toy_dataset.indices("test")[:2]]
        images = fitted.predict(cams)
        assert len(images) == 2
        assert images[0].shape == (24, 24, 3)
        pairs = fitted.predict(cams, with_depth=True)
        color, depth = pairs[0]
        assert color.shape == (24, 24, 3) and depth.shape == (24, 24)

    def test_score_improves_over_untrained_background(self, fitted,
                                                      small_toy_dataset):
        score = fitted.score(small_toy_dataset, split="test")
        assert np.isfinite(score)
        assert score > 12.0

    def test_score_rejects_empty_split(self, fitted, small_toy_dataset):
        subset = small_toy_dataset.subset(small_toy_dataset.indices("train"))
        with pytest.raises(InvalidParameterError):
            fitted.score(subset, split="test")


class TestCheckDataset:
    def test_rejects_non_dataset(self):
        with pytest.raises(InvalidParameterError, match="Dataset"):
            check_dataset([np.zeros((4, 4, 3))])

    def test_rejects_out_of_range_images(self, small_toy_dataset):
        bad = small_toy_dataset.subset([0])
        bad.images[0] = bad.images[0] + 2.0
        with pytest.raises(InvalidParameterError, match=r"\[0, 1\]"):
            check_dataset(bad)
