"""Channel-agnostic masked-autoencoding foundation models for cardiac signals, at desk scale."""

from .errors import (
    ConfigError,
    ContractError,
    CSFMError,
    DataError,
    NumericError,
    ParseError,
    VocabularyError,
)
from .heads import TaskSpec, extract_embedding, finetune_transfer, logistic_probe, sbp_dbp
from .model import CSFM, ModelConfig, config_family, load_checkpoint, micro_config, save_checkpoint
from .signals import ChannelKind, SignalRecord, SyntheticConfig, load_record, make_corpus, save_record, synth_multichannel
from .tokens import MaskMode, MaskPlan, patchify, sample_mask
from .training import TrainConfig, pretrain, train

__version__ = "0.1.0"

__all__ = [
    "CSFM", "CSFMError", "ChannelKind", "ConfigError", "ContractError", "DataError", "MaskMode", "MaskPlan",
    "ModelConfig", "NumericError", "ParseError", "SignalRecord", "SyntheticConfig", "TaskSpec", "TrainConfig",
    "VocabularyError", "config_family", "extract_embedding", "finetune_transfer", "load_checkpoint", "load_record",
    "logistic_probe", "make_corpus", "micro_config", "patchify", "pretrain", "sample_mask", "save_checkpoint",
    "save_record", "sbp_dbp", "synth_multichannel", "train",
]
