"""Scikit-learn style facade over the training and sampling pipeline."""

from sklearn.base import BaseEstimator

from .blockworld import atp, build_fusion_system, load_task, read_episodes
from .flow import IntegratorSpec
from .numcore import Rng
from .policy import ModelConfig, sample_actions
from .topomask import build_mask
from .trainer import TrainConfig, evaluate, train


class TopoFlowPolicy(BaseEstimator):
    """Transition-masked flow policy with a fit/predict/score interface.

    Parameters mirror the model and trainer configs; they are stored
    verbatim (scikit-learn convention) and validated when ``fit`` runs.
    ``fit`` accepts a list of episodes or a path to an episode JSONL file.
    """

    def __init__(self, d_model=64, n_heads=4, n_layers=2, n_prims=4,
                 mode="hard", epochs=10, batch_size=32, lr=3e-4, seed=0,
                 mask_every=4, mask_eta=0.05, integrator="rk4", n_steps=4):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.n_prims = n_prims
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.mask_every = mask_every
        self.mask_eta = mask_eta
        self.integrator = integrator
        self.n_steps = n_steps

    def _episodes(self, X):
        if isinstance(X, (str, bytes)):
            return read_episodes(X)
        return list(X)

    def _require_fitted(self, action):
        if not hasattr(self, "params_"):
            raise RuntimeError("Cannot %s before fitting; call fit first" % action)

    def _spec(self):
        return IntegratorSpec(self.integrator, self.n_steps)

    def fit(self, X, y=None):
        """Train on demo episodes; X is a list of episodes or a JSONL path."""
        episodes = self._episodes(X)
        if not episodes:
            raise ValueError("no episodes to fit on")
        horizon = episodes[0].tokens.shape[0]
        n_tasks = max(ep.task_id for ep in episodes) + 1
        model_cfg = ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            horizon=horizon,
            n_prims=self.n_prims,
            n_tasks=n_tasks,
            mode=self.mode,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            mask_every=self.mask_every,
            mask_eta=self.mask_eta,
        )
        self.fusion_ = build_fusion_system(horizon=horizon)
        initial_mask = build_mask(self.fusion_, mode=self.mode)
        result = train(episodes, self.fusion_, initial_mask, model_cfg, train_cfg)

        self.params_ = result.params
        self.mask_ = result.mask
        self.report_ = result.report
        self.model_config_ = model_cfg
        return self

    def sample(self, observation, seed=0):
        """One decoded rollout for an observation; returns a SampledSequence."""
        self._require_fitted("sample")
        rng = Rng(self.seed).stream(0x5A17 + seed)
        return sample_actions(self.params_, observation, self.mask_, self._spec(), rng)

    def predict(self, X):
        """Decoded action sequences, one list of actions per input row.

        Rows may be episodes (their stored observation is used) or bare
        observations.
        """
        self._require_fitted("predict")
        rows = self._episodes(X)
        out = []
        for i, row in enumerate(rows):
            obs = row.observation if hasattr(row, "observation") else row
            out.append(self.sample(obs, seed=i).actions)
        return out

    def score(self, X, y=None):
        """Mean ordered task progress of rollouts replayed from X's starts."""
        self._require_fitted("score")
        episodes = self._episodes(X)
        if not episodes:
            raise ValueError("no episodes to score on")
        tasks = {}
        total = 0.0
        for i, ep in enumerate(episodes):
            task = tasks.setdefault(ep.task_name, load_task(ep.task_name))
            seq = self.sample(ep.observation, seed=i)
            total += atp(task, ep.start, seq.actions)
        return total / len(episodes)

    def evaluate(self, tasks, n_episodes=20, variant="full", invariants=False):
        """Fresh-start rollout metrics per task (see trainer.evaluate)."""
        self._require_fitted("evaluate")
        return evaluate(
            self.params_, self.mask_, tasks, n_episodes,
            self._spec(), seed=self.seed, variant=variant, invariants=invariants,
        )
