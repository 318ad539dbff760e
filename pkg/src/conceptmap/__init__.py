"""Masked concept-token autoencoder with a layer-paired concept-map decoder."""

from .autograd import (Tape, Tensor, backward, gather_rows, gelu, layer_norm,
                       matmul, scatter_rows, softmax_lastdim)
from .data import (ConceptBank, ConceptSpec, DatasetRecord, build_prototype_bank,
                   default_concept_spec, gen_synthetic, load_folder,
                   load_prototype_bank, prototypes_for, read_ppm,
                   save_prototype_bank, write_ppm)
from .layers import AdamW, FeedForward, Linear, MultiHeadAttention, ParamRegistry, init_params
from .losses import (LossWeights, antonym_swap, disentangle_loss,
                     masked_recon_loss, sample_single_hot, total_loss,
                     weighted_concept_loss)
from .model import (ConceptMapModel, ForwardOutput, MaskPlan, ModelConfig,
                    edit_concepts, make_mask_plan, patchify, preset_config,
                    unpatchify)
from .trainer import (Checkpoint, MetricsReport, TrainConfig, evaluate,
                      load_checkpoint, mask_ratio_sweep, predict_concepts,
                      restore_model, save_checkpoint, train)

__version__ = "0.1.0"
