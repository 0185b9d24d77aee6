"""Emotion GAN: networks, losses and training."""

from .losses import (LossReport, LossWeights, NonFiniteLossError, adv_losses, categorical_cross_entropy,
                     compose_losses, dtw_distance, dtw_path, kl_divergence, mse, mutual_information,
                     mutual_information_loss)
from .network import (AuxRegTarget, EmotionDistribution, NetConfig, discriminator_forward, generator_forward,
                      init_discriminator, init_generator, make_batch, predict)
from .train import ModelState, TrainConfig, accuracy, init_state, train

__all__ = ["LossReport", "LossWeights", "NonFiniteLossError", "adv_losses", "categorical_cross_entropy",
           "compose_losses", "dtw_distance", "dtw_path", "kl_divergence", "mse", "mutual_information",
           "mutual_information_loss", "AuxRegTarget", "EmotionDistribution", "NetConfig", "discriminator_forward",
           "generator_forward", "init_discriminator", "init_generator", "make_batch", "predict", "ModelState",
           "TrainConfig", "accuracy", "init_state", "train"]
