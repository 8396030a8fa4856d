"""Framework-independent test input prioritization for classifier DNNs.

Ranks pre-recorded activation traces and softmax outputs by
failure-revealing and active-learning potential: neuron coverage,
surprise adequacy, softmax uncertainty, plus APFD and statistical
evaluation machinery.
"""

from .core import (ActivationMatrix, ConfigError, DataError, SoftmaxMatrix,
                   StochasticPredictionStack, TestSet, argmax_predictions,
                   load_matrix, save_matrix)
from .coverage import (CoverageProfile, NCConfig, NeuronStats,
                       coverage_profile, fit_neuron_stats, load_profile,
                       save_profile, stream_profiles)
from .evaluate import (ApfdResult, StatResult, apfd, bonferroni,
                       pairwise_stats, select_active,
                       vargha_delaney_a12_paired, wilcoxon_signed_rank)
from .prioritize import Ranking, cam_order, ctm_order, score_order
from .surprise import (SAConfig, SAModel, SurpriseScores, dsa_batched,
                       fit_sa, load_sa_model, sa_score, save_sa_model,
                       surprise_profile)
from .uncertainty import (deepgini, entropy, mc_dropout_variation_ratio,
                          pcs, vanilla_softmax)

__version__ = "0.1.0"
