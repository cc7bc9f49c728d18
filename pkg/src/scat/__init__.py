"""Split conformal prediction and transductive adaptation over frozen embeddings."""

__version__ = "0.1.0"

from .classifier import PrototypeClassifier, build_text_prototypes, predict_proba
from .conformal import (
    ConformalPredictor,
    NonconformityScorer,
    build_sets,
    conformal_quantile,
    fit_conformal,
    score,
)
from .embeddings import EmbeddingSet, LabelMarginal, empirical_marginal, load_embeddings, save_embeddings, split_concat
from .evaluation import aca, ccv, coverage, mean_set_size, run_trials, sample_calibration
from .pipelines import ProbeConfig, StrategyConfig, run_adapt_scp, run_sca_t, run_scp
from .synth import SynthSpec, SynthWorld, generate
from .transduction import SolverConfig, gradient, objective_kl, objective_tim, solve
