"""Discrete-latent conditional VAE for short-text response generation.

The latent variable is a vocabulary word; sampling factorizes into a cluster
stage and a within-cluster word stage. Built on a small reverse-mode
autodiff core over numpy float64 arrays.
"""

from .autodiff import Tape, Tensor, apply_primitive, backward, constant, grad_check, parameter
from .clustering import ClusterModel, WordEmbeddings, cluster_of, kmeans
from .corpus import (
    Example,
    LatentSpace,
    SyntheticSpec,
    Vocab,
    build_vocab,
    load_corpus,
    restrict_latent_space,
    synthesize_corpus,
    tfidf_keywords,
)
from .layers import AttentionParams, BiGRUEncoder, GRUParams, ScorerParams, attend, encode_bidirectional, gru_step, score
from .metrics import EvalReport, bleu_n, distinct_n, evaluate
from .model import (
    DCVAEParams,
    FlatDist,
    LatentConfig,
    ModelDims,
    TwoStageDist,
    bow_logits,
    build_params,
    decode_step,
    latent_repr,
    load_checkpoint,
    posterior_dist,
    prior_dist,
    save_checkpoint,
)
from .sampling import BeamHypothesis, GenerationResult, beam_search, generate_diverse, sample_categorical, two_stage_sample
from .training import (
    AdamState,
    LossBreakdown,
    TrainConfig,
    adam_step,
    bow_nll,
    exact_objective,
    kl_categorical,
    kl_two_stage,
    pretrain,
    pretrain_step,
    train,
    training_loss,
)

__version__ = "0.1.0"
