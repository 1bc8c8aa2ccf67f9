"""Cross-domain triplet metric learning with episodic meta-training, in numpy."""

from .data import DomainDataset, SynthConfig, TripletBatch, augment, generate, load, sample_triplets, store
from .errors import (
    CDTError,
    ContractError,
    ConvergenceError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    InsufficientSamplesError,
    NumericalError,
    ParseError,
)
from .evaluation import (
    EvalReport,
    evaluate_domain,
    identification_accuracy,
    leave_one_domain_out,
    rank1,
    roc,
    verification_accuracy_10split,
)
from .jacobi import sym_eig
from .losses import LossConfig, cdt_loss, lmcl_loss, triplet_loss
from .metrics import PairCovariance, alignment_energy, estimate_covariance, mahalanobis_sq
from .model import ModelConfig, ModelParams, init_params, read_checkpoint, write_checkpoint
from .trainer import EpisodeTrace, TrainConfig, meta_gradient, run_episode, train

__version__ = "0.1.0"
