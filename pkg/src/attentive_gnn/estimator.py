"""scikit-learn style front end for episodic training and few-shot prediction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attention import AttentionConfig, model_forward
from .episodes import FeatureDataset, build_task_graph
from .training import TrainConfig, evaluate, frozen, train


class AttentiveGNNClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot classifier trained on episodes drawn from ``(X, y)``.

    ``fit`` meta-trains on N-way K-shot tasks sampled from the labelled
    pool. Prediction needs a labelled support set with exactly ``n_way``
    classes; queries are classified jointly (transductive) or one per graph
    (inductive).

    Parameters
    ----------
    alpha, beta, layers, hidden_m, mlp_widths, memory_mode, query_init,
    leaky_slope, row_renormalize_adjacency, normalize_fusion, self_attention
        Model hyper-parameters, see :class:`AttentionConfig`.
    n_way, k_shot, q_query, setting, query_dist
        Shape of the training episodes.
    learning_rate, weight_decay, batch_tasks, total_episodes,
    lr_halving_interval, eval_interval, eval_episodes
        Optimisation schedule, see :class:`TrainConfig`.
    random_state : int
        Seeds initialisation, episode sampling and evaluation.
    """

    def __init__(self, alpha=0.5, beta=0.7, layers=3, hidden_m=16, mlp_widths=None,
                 memory_mode="dense", query_init="uniform", leaky_slope=0.2,
                 row_renormalize_adjacency=False, normalize_fusion=False, self_attention=True,
                 n_way=5, k_shot=1, q_query=5, setting="transductive", query_dist="uniform",
                 learning_rate=1e-3, weight_decay=1e-6, batch_tasks=20, total_episodes=5000,
                 lr_halving_interval=2000, eval_interval=500, eval_episodes=200, random_state=0):
        self.alpha = alpha
        self.beta = beta
        self.layers = layers
        self.hidden_m = hidden_m
        self.mlp_widths = mlp_widths
        self.memory_mode = memory_mode
        self.query_init = query_init
        self.leaky_slope = leaky_slope
        self.row_renormalize_adjacency = row_renormalize_adjacency
        self.normalize_fusion = normalize_fusion
        self.self_attention = self_attention
        self.n_way = n_way
        self.k_shot = k_shot
        self.q_query = q_query
        self.setting = setting
        self.query_dist = query_dist
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_tasks = batch_tasks
        self.total_episodes = total_episodes
        self.lr_halving_interval = lr_halving_interval
        self.eval_interval = eval_interval
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            alpha=self.alpha, beta=self.beta, layers=self.layers, hidden_m=self.hidden_m,
            mlp_widths=self.mlp_widths, memory_mode=self.memory_mode, query_init=self.query_init,
            leaky_slope=self.leaky_slope, row_renormalize_adjacency=self.row_renormalize_adjacency,
            normalize_fusion=self.normalize_fusion, self_attention=self.self_attention,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            batch_tasks=self.batch_tasks, total_episodes=self.total_episodes,
            lr_halving_interval=self.lr_halving_interval, eval_interval=self.eval_interval,
            eval_episodes=self.eval_episodes, seed=self.random_state, n_way=self.n_way,
            k_shot=self.k_shot, q_query=self.q_query, setting=self.setting, query_dist=self.query_dist,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        """Meta-train on episodes from ``(X, y)``; validation accuracy uses ``(X_val, y_val)`` if given."""
        X, y = check_X_y(X, y, dtype=np.float64)
        acfg, cfg = self.attention_config(), self.train_config()
        ds = FeatureDataset(X, y)
        eval_ds = None
        if X_val is not None:
            Xv, yv = check_X_y(X_val, y_val, dtype=np.float64)
            if Xv.shape[1] != X.shape[1]:
                raise ValueError(f"X_val has {Xv.shape[1]} features, X has {X.shape[1]}")
            eval_ds = FeatureDataset(Xv, yv, "val")
        result = train(ds, cfg, acfg, eval_ds=eval_ds)
        self.params_ = result.params
        self.state_ = result.state
        self.metrics_ = result.log
        self.loss_curve_ = result.loss_curve
        self.n_features_in_ = X.shape[1]
        return self

    def _support(self, X_support, y_support):
        Xs, ys = check_X_y(X_support, y_support, dtype=np.float64)
        if Xs.shape[1] != self.n_features_in_:
            raise ValueError(f"support has {Xs.shape[1]} features, model was fit with {self.n_features_in_}")
        classes, pos = np.unique(ys, return_inverse=True)
        if len(classes) != self.n_way:
            raise ValueError(f"support set must contain exactly {self.n_way} classes, got {len(classes)}")
        return Xs, pos, classes

    def decision_function(self, X, X_support, y_support):
        """Query logits, columns ordered as ``np.unique(y_support)``."""
        check_is_fitted(self, "params_")
        Xq = check_array(X, dtype=np.float64)
        if Xq.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {Xq.shape[1]} features, model was fit with {self.n_features_in_}")
        Xs, pos, _ = self._support(X_support, y_support)
        acfg = self.attention_config()
        params = frozen(self.params_)
        dummy = np.zeros(len(Xq), dtype=int)
        if self.setting == "inductive":
            rows = [model_forward(build_task_graph(Xs, pos, Xq[i:i + 1], dummy[:1], self.n_way,
                                                   acfg.query_init), params, acfg).data
                    for i in range(len(Xq))]
            return np.vstack(rows)
        task = build_task_graph(Xs, pos, Xq, dummy, self.n_way, acfg.query_init)
        return model_forward(task, params, acfg).data

    def predict_proba(self, X, X_support, y_support):
        z = self.decision_function(X, X_support, y_support)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, X_support, y_support):
        check_is_fitted(self, "params_")
        _, _, classes = self._support(X_support, y_support)
        return classes[np.argmax(self.decision_function(X, X_support, y_support), axis=1)]

    def score(self, X, y, episodes=None, seed=None):
        """Mean episodic accuracy on tasks sampled from the labelled pool ``(X, y)``."""
        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, dtype=np.float64)
        acc, _ = evaluate(self.params_, FeatureDataset(X, y, "test"), self.train_config(),
                          self.attention_config(), episodes=episodes, seed=seed)
        return acc
