"""3D conditional GAN: U-Net generator, spectral-normalized patch
discriminator, masked L1 plus least-squares adversarial training."""
from .losses import adversarial_losses, lsgan_d_loss, lsgan_g_loss, masked_l1_loss
from .networks import ConfigError, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from .training import (EpochRecord, GanModel, NumericalError, StepReport, TrainConfig, TrainingPair,
                       batch_order, generate_normalized, load_model, read_loss_log, save_model, synthesize,
                       train, train_step, write_loss_log)

__all__ = [
    "ConfigError", "Discriminator", "DiscriminatorConfig", "EpochRecord", "GanModel", "Generator",
    "GeneratorConfig", "NumericalError", "StepReport", "TrainConfig", "TrainingPair", "adversarial_losses",
    "batch_order", "generate_normalized", "load_model", "lsgan_d_loss", "lsgan_g_loss", "masked_l1_loss",
    "read_loss_log", "save_model", "synthesize", "train", "train_step", "write_loss_log",
]
