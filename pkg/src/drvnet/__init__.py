"""Dense residual UNet (RDN + RSE blocks) for retinal vessel segmentation."""
from .blocks import RDNBlock, RSEBlock, SEGate, global_avg_pool, se_gate, se_recalibrate
from .evaluation import aggregate, binarize, confusion, metrics, roc_auc, summarize_run
from .loss import LossWeights, bce_loss, composite_loss, dice_loss
from .network import DRVNet, ModelConfig, build_backbone, build_model, build_tail, forward_full
from .training import (
    Checkpoint,
    TrainSchedule,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train_phase1,
    train_phase2,
)

__version__ = "0.1.0"
