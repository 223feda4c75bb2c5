"""Progressive recurrent single-image deraining with a frozen segmentation
branch and perceptual contrastive training."""

from .attention import AttentionKind, ChannelAttention, reduced_width
from .config import (RunConfig, ablation_matrix, config_hash, default_config,
                     format_config, parse_config_file, parse_config_text, resolve)
from .data import (DatasetSpec, PairedSample, load_image, load_pairs,
                   random_crop_pair, save_image, synth_rain)
from .errors import (CheckpointError, ConfigError, InputError, NumericError,
                     PretrainedWeightsUnavailable, SapnetError)
from .losses import (FeatureExtractor, LossBreakdown, LossWeights,
                     build_feature_extractor, extract_features, lpisl,
                     negative_ssim_loss, pcl, total_loss)
from .metrics import (EvalReport, evaluate, format_report, gaussian_window,
                      psnr, ssim, ssim_metric, write_report)
from .network import (ConvLSTMCell, DerainNet, DerainOutput, ModelConfig,
                      RecurrentState, ResidualBlock, build_derain_net, derain,
                      parameter_count, receptive_field)
from .segmentation import (EncoderKind, SegConfig, SegmentationNet,
                           build_segmenter, focal_seg_loss, segment)
from .trainer import (Checkpoint, TrainConfig, TrainLogRecord, TrainResult,
                      TrainToggles, effective_loss_weights, effective_model_config,
                      load_checkpoint, lr_at, save_checkpoint, train)

__version__ = "0.1.0"
