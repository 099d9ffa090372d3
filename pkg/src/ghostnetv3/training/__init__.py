"""Training recipe: losses, optimizers, schedules, EMA, augmentation and the loop."""
from .augment import AugmentConfig, cutmix, mix_batch, mixup, rand_transforms, random_erasing
from .ema import EMAState, ema_update
from .losses import KDConfig, cross_entropy, kd_loss, kd_loss_grad, kd_loss_literal, total_loss
from .loop import ImageSet, Recipe, TrainingDiverged, TrainState, evaluate, train_loop
from .optim import Moments, OptimizerConfig, lamb_trust_ratio, optimizer_step
from .schedule import ScheduleConfig, lr_at

__all__ = [
    "AugmentConfig", "cutmix", "mix_batch", "mixup", "rand_transforms", "random_erasing",
    "EMAState", "ema_update",
    "KDConfig", "cross_entropy", "kd_loss", "kd_loss_grad", "kd_loss_literal", "total_loss",
    "ImageSet", "Recipe", "TrainingDiverged", "TrainState", "evaluate", "train_loop",
    "Moments", "OptimizerConfig", "lamb_trust_ratio", "optimizer_step",
    "ScheduleConfig", "lr_at",
]
