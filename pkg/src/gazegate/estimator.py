"""scikit-learn style front end: ``fit`` binds a decoder, ``predict`` decodes episodes."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .decode import DecodePolicy, generate_batch
from .decoder import DecoderWeights
from .exceptions import ConfigError
from .harness import Episodes, PlantedWorld, hallucination_rate, score_episodes


class GazeGatedGenerator(BaseEstimator):
    """Interaction-gated decoding behind the estimator protocol.

    Nothing is learned. ``fit`` accepts a :class:`PlantedWorld` or bare
    :class:`DecoderWeights` and stores them; hyperparameters are the decode
    policy fields, so ``get_params``/``set_params``/``clone`` work as usual.
    """

    def __init__(self, kappa: float = 1.8, alpha: float = 0.5, k: int = 8,
                 layer_band: Optional[tuple] = None, statistic: str = "mean_abs",
                 strategy: str = "nucleus", temperature: float = 1.0, top_p: float = 1.0,
                 beam_width: int = 1, max_new_tokens: int = 24, persist: bool = True,
                 gate: str = "cds", seed: int = 0):
        self.kappa = kappa
        self.alpha = alpha
        self.k = k
        self.layer_band = layer_band
        self.statistic = statistic
        self.strategy = strategy
        self.temperature = temperature
        self.top_p = top_p
        self.beam_width = beam_width
        self.max_new_tokens = max_new_tokens
        self.persist = persist
        self.gate = gate
        self.seed = seed

    def policy(self) -> DecodePolicy:
        return DecodePolicy(**self.get_params())

    def fit(self, X, y=None):
        if isinstance(X, PlantedWorld):
            self.weights_, self.token_class_ = X.weights, X.token_class
        elif isinstance(X, DecoderWeights):
            self.weights_, self.token_class_ = X, None
        else:
            raise ConfigError("fit expects a PlantedWorld or DecoderWeights")
        self.policy_ = self.policy()
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise ConfigError("call fit before decoding")

    def generate(self, episodes: Episodes) -> list:
        """Full :class:`EpisodeReport` per episode."""
        self._check_fitted()
        reps = generate_batch(self.weights_, episodes.images, episodes.prompts, self.policy_,
                              seeds=episodes.seeds, token_class=self.token_class_)
        score_episodes(reps, episodes.truth)
        return reps

    def predict(self, episodes: Episodes) -> list:
        return [np.asarray(r.tokens, dtype=np.int64) for r in self.generate(episodes)]

    def score(self, episodes: Episodes, y=None) -> float:
        """1 - hallucination rate (higher is better)."""
        return 1.0 - hallucination_rate(self.generate(episodes))
