"""Desk-scale masked-autoencoder pre-training with global guidance from an
EMA target encoder, built on a small numpy-backed autograd core."""

from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     LcmaeError, NumericError, ShapeError)
from .tensor import (BatchNormState, Tensor, activation, batch_norm, gather_rows,
                     grad_check, grad_check_params, l2_normalize, layer_norm,
                     matmul, softmax_lastdim)
from .vit import AttentionRecord, ViTConfig, patchify, unpatchify
from .masking import MaskPlan, assemble_decoder_input, sample_mask, split_tokens
from .augment import (AugmentConfig, ViewPair, make_view_pair, photometric,
                      random_resized_crop, simple_resized_crop)
from .model import (GuidanceConfig, ModelState, ema_update, ema_update_state,
                    init_model)
from .objective import (global_guidance_loss, lcmae_forward, mae_baseline_forward,
                        mim_loss, pooled_online_repr, pooled_target_repr,
                        simmim_forward, token_wise_guidance_loss)
from .trainer import (OptimizerState, ProbeConfig, TrainConfig, adamw_step,
                      layer_lr_scale, lcmae_step, linear_probe, lr_at, pretrain)
from .analysis import (AttentionMapResult, SpectrumResult, attention_maps,
                       mean_attention_distance, layer_features, sv_gap_curve,
                       sv_spectrum)
from .data import TinyImageDataset, generate_synthetic, load_dataset, save_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .cli import cli_dispatch

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
