"""Query-guided Siamese networks for few-shot fine-grained classification and person search."""

from .backbone import BackboneConfig, SiameseEncoder
from .fewshot import EpisodeEvaluator, FewShotModelConfig, FewShotQGN, FewShotTrainConfig, FewShotTrainer
from .qrpn import QRPN, QueryGate
from .qsimnet import QSimNet, sim_score
from .qsse import QSSE, qsse_forward
from .search import SearchEvaluator, SearchModelConfig, SearchQGN, SearchTrainConfig, SearchTrainer

__version__ = "0.1.0"

__all__ = [
    "QRPN", "QSSE", "BackboneConfig", "EpisodeEvaluator", "FewShotModelConfig", "FewShotQGN",
    "FewShotTrainConfig", "FewShotTrainer", "QSimNet", "QueryGate", "SearchEvaluator",
    "SearchModelConfig", "SearchQGN", "SearchTrainConfig", "SearchTrainer", "SiameseEncoder",
    "qsse_forward", "sim_score",
]
