"""Sparse-view voxel radiance field reconstruction on the CPU."""

from .cameras import Camera, RayBatch, generate_rays, ndc_warp
from .datasets import (Dataset, ToySceneSpec, generate_toy_scene,
                       load_dataset, load_transforms_json, subsample_views)
from .checkpoints import load_checkpoint, save_checkpoint
from .errors import (CheckpointFormatError, ConfigurationError,
                     InvalidParameterError, TrainingDivergedError)
from .estimator import SparseViewReconstructor
from .grids import (DensityActivation, ExpandingBoxSchedule, VoxelGrid,
                    compute_shift, trilinear_adjoint, trilinear_sample,
                    upsample_grid)
from .losses import (LossWeights, catv_loss, cavs_loss, color_awareness,
                     ds_loss, photometric_loss, total_loss, tv_loss)
from .metrics import MetricReport, mse_to_psnr, psnr, ssim
from .rendering import (RadianceField, RenderConfig, RenderOutput, composite,
                        query_field, render_backward, render_depth_patch,
                        render_image, render_rays, sample_points)
from .training import (AdamState, PoseSampler, StageConfig, TrainConfig,
                       adam_step, lr_at, preset, train_pipeline, train_stage)

__version__ = "0.1.0"
