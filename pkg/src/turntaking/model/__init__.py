"""Recurrent sequence model, losses and two-stage training."""
from .features import FeatureConfig, featurize
from .losses import bce, focal_loss
from .network import ModelConfig, SequenceModel
from .train import TrainConfig, finetune_stage2, gradient_check, pretrain_stage1
