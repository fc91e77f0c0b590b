"""Day/night latent-imagination reinforcement learning.

Day phase: learn a discrete-latent recurrent world model from limited real
experience while training a PPO agent on encoded observations. Night phase:
keep training the agent purely on imagined rollouts that start from random
latent states and are perturbed by generative augmentations.
"""

from .config import ConfigError, ExperimentConfig, named_generator
from .encodings import BucketSpec, symexp, symlog, two_hot_decode, two_hot_encode
from .worldmodel import (LatentState, WorldModel, WorldModelLossReport,
                         load_checkpoint, parameter_digest, save_checkpoint,
                         world_model_update)
from .replay import Episode, ReplayDataset, SequenceBatch
from .agent import (ActorCritic, AdvNormState, CriticOutput, PolicyOutput, PpoBatch,
                    PpoReport, gae, normalize_advantages, ppo_loss, ppo_update)
from .dreaming import (DreamBatch, deep_dream, imagine_rollout, project_to_one_hot,
                       random_swing, sample_initial_states, value_diversify)
from .envs import EnvSpec, GridWorld, LevelSampler, ShapingConfig, make_env, shape_reward
from .orchestrator import (Collector, LatentPolicy, MetricsLog, Trainer, evaluate,
                           run_experiment)
from .plotting import plot_metrics

__version__ = "0.1.0"
