"""Single-step adversarial training with confidence-dependent budgets,
state-dependent soft labels and a weighted smoothness regulariser."""
from .attacks import AttackSpec, ddg_single_step, evaluate_robustness, parse_attack, run_attack
from .data import IndexedDataset, load_cifar10, make_synthetic
from .errors import ConfigError, DDGError, IngestionError, NaNLossError, ValidationError
from .guidance import (
    BudgetVector,
    ConfidenceRank,
    GuidanceConfig,
    adjust_supervision,
    allocate_budgets,
    rank_confidence,
    relax_labels,
    smoothness_weights,
    total_loss,
)
from .models import build_model, load_checkpoint, save_checkpoint
from .training import TrainPlan, detect_co, train, train_baseline, train_ddg

__version__ = "0.1.0"
