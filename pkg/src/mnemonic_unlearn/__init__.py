"""One-shot class forgetting for numpy MLPs trained with mnemonic codes."""
from .datasets import (ClassPartition, LabeledDataset, MnemonicCodebook, generate_codebook,
                       load_mnist, make_synthetic)
from .estimators import FisherForgetter, MnemonicMLPClassifier
from .evaluator import EvalReport, forgetting_capability, mia_auc, never_outputs_class
from .nn import MlpModel, SgdConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, plain_train, train_with_codes
from .unlearner import ForgetReport, fim_error, forget, forget_with_data

__all__ = [
    "ClassPartition", "EvalReport", "FisherForgetter", "ForgetReport", "LabeledDataset",
    "MlpModel", "MnemonicCodebook", "MnemonicMLPClassifier", "SgdConfig", "TrainConfig",
    "fim_error", "forget", "forget_with_data", "forgetting_capability", "generate_codebook",
    "load_checkpoint", "load_mnist", "make_synthetic", "mia_auc", "never_outputs_class",
    "plain_train", "save_checkpoint", "train_with_codes",
]
