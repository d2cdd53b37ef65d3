"""Interaction-gated visual attention boosting for a toy vision-language decoder."""

from .coalitions import Coalition, CoalitionCaches, auxiliary_logits, init_episode, init_episodes
from .decode import DecodePolicy, beam_generate, decode_step, generate, generate_batch
from .decoder import Decoder, DecoderConfig, DecoderWeights, KvCache, forward
from .estimator import GazeGatedGenerator
from .exceptions import (CapacityError, ConfigError, GazeGateError, InsufficientCandidatesError,
                         InsufficientHeadsError, NumericDomainError, ShapeError, UndefinedMetricError)
from .harness import (ScenarioSpec, build_planted_decoder, make_episodes, run_comparison, sweep)
from .intervention import InterventionPlan, apply_to_layers, fci_boost
from .sensor import harsanyi_interaction, interaction_variance, sense, top_k
from .telemetry import EpisodeReport, StepTrace, distinct2, hdi, visual_attention_ratio

__version__ = "0.1.0"
