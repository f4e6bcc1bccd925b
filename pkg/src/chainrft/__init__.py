"""Reinforcement fine-tuning laboratory on synthetic chain-arithmetic tasks.

The package walks the full pipeline at desk scale: a generalist policy
pretrained on an additive source domain, rejection-sampled reasoning traces,
supervised imitation, PPO with a hybrid process/outcome reward, template
augmentation, retrieval-conditioned features, and a method-comparison
harness with seeded, reproducible metrics.
"""

from ._kernels import backend_name
from .taskenv import (TaskSpec, Question, CandidateSet, MdpState,
                      generate_question, generate_dataset, candidate_steps,
                      transition, serialize_trace, extract_letter,
                      source_spec, target_spec)
from .policy import (PolicyParams, FeatureLayout, init_params, featurize,
                     action_distribution, sample_action, log_prob, value,
                     grad_log_prob, grad_value, save_params, load_params,
                     NumericError)
from .reward import (RewardConfig, outcome_reward, process_reward, aggregate,
                     combine, reward_schedule)
from .distill import (ProcessDataset, ProcessRecord, SftConfig,
                      synthesize_traces, synthesize_mismatched, oracle_traces,
                      sft_loss, sft_grad, sft_train)
from .ppo import (PpoConfig, Trajectory, rollout, compute_advantages,
                  clipped_term, ppo_update, train_rft)
from .augment import AugmentConfig, augment_question, augment_dataset
from .retrieval import (RetrievalIndex, build_index, retrieve, embed,
                        icl_context, make_icl_fn)
from .harness import (ExperimentConfig, MetricsReport, EvalResult, METHODS,
                      HarnessError, ThresholdError, pretrain_vanilla,
                      run_method, run_matrix, evaluate, data_scale_sweep,
                      emit_report, load_report, format_summary)

__version__ = "0.1.0"
