"""Language-ID prompting for self-conditioned CTC encoders, on a numpy autodiff core."""
from .corpus import CorpusConfig, CorpusManifest, generate_corpus, load_corpus, save_corpus
from .ctc import ctc_loss, ctc_prefix_score
from .decoding import DecodeConfig, joint_beam_search
from .harness import ExperimentReport, GridSpec, compute_cer, run_experiment_grid
from .model import EncoderConfig, ModelWeights, encode
from .prompting import PromptMode, PromptSpec, apply_prompt
from .training import TrainConfig, train
from .vocab import PosteriorLattice, VocabSpec

__version__ = "0.1.0"

__all__ = [
    "CorpusConfig", "CorpusManifest", "generate_corpus", "load_corpus", "save_corpus",
    "ctc_loss", "ctc_prefix_score", "DecodeConfig", "joint_beam_search",
    "ExperimentReport", "GridSpec", "compute_cer", "run_experiment_grid",
    "EncoderConfig", "ModelWeights", "encode", "PromptMode", "PromptSpec", "apply_prompt",
    "TrainConfig", "train", "PosteriorLattice", "VocabSpec",
]
