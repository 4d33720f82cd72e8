"""scikit-learn style wrappers.

Both estimators take ``X`` of shape ``(n_windows, window_len)`` holding raw
speeds and ``y`` holding the next raw speed; scaling is handled internally.
"""
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .alc import AlcParams, run_alc
from .data import DpcDataset, Normalization
from .errors import ConfigurationError
from .lstm import LstmConfig, train
from .mdp import REFERENCE_EPOCH_TIMES, MdpModel, value_iteration
from .metrics import compute_aare


def _dataset(X, y, X_test, y_test, norm):
    L = X.shape[1]
    if X_test is None:
        X_test, y_test = np.empty((0, L)), np.empty(0)
    return DpcDataset(
        window_len=L,
        X_train=norm.normalize(X), y_train=norm.normalize(y),
        X_test=norm.normalize(X_test), y_test=norm.normalize(y_test),
        raw_test_targets=np.asarray(y_test, dtype=float), normalization=norm,
    )


class _WindowRegressor(RegressorMixin, BaseEstimator):
    def _validate_predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        X = self._validate_predict(X)
        return self.model_.predict_original(X)

    def aare(self, X, y):
        """Average absolute relative error of the predictions on ``(X, y)``."""
        return compute_aare(y, self.predict(X))


class LstmForecaster(_WindowRegressor):
    """One LSTM with a fixed layer count and epoch budget."""

    def __init__(self, hidden_layers=1, epochs=100, hidden_units=32, learning_rate=1e-3,
                 random_state=0):
        self.hidden_layers = hidden_layers
        self.epochs = epochs
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        norm = Normalization.fit(np.concatenate([X.ravel(), y]))
        config = LstmConfig(self.hidden_layers, self.epochs, self.hidden_units, X.shape[1],
                            self.learning_rate, int(self.random_state or 0))
        outcome = train(config, _dataset(X, y, None, None, norm))
        self.model_ = outcome.model
        self.loss_history_ = list(outcome.loss_history)
        return self


class AlcForecaster(_WindowRegressor):
    """Searches layers x epochs with the value-iteration guided ALC procedure.

    The last ``validation_fraction`` of the rows (or an explicit
    ``eval_set``) plays the role of the testing split that decides whether a
    configuration improved.
    """

    def __init__(self, max_layers=3, max_epochs=100, epoch_step=20, delta=0.05, epoch_times=None,
                 alpha=0.5, beta=0.5, theta=1.0, hidden_units=32, learning_rate=1e-3,
                 validation_fraction=0.375, random_state=0):
        self.max_layers = max_layers
        self.max_epochs = max_epochs
        self.epoch_step = epoch_step
        self.delta = delta
        self.epoch_times = epoch_times
        self.alpha = alpha
        self.beta = beta
        self.theta = theta
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _mdp(self):
        times = self.epoch_times
        if times is None:
            if self.max_layers > len(REFERENCE_EPOCH_TIMES):
                raise ConfigurationError("epoch_times is required for more than 5 layers")
            times = {h: REFERENCE_EPOCH_TIMES[h] for h in range(1, self.max_layers + 1)}
        elif not isinstance(times, dict):
            times = {h + 1: float(t) for h, t in enumerate(times)}
        return MdpModel(n=self.max_layers, k=self.max_epochs, e=self.epoch_step,
                        epoch_time=times, theta=self.theta,
                        default_alpha=self.alpha, default_beta=self.beta)

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if eval_set is None:
            if not 0 < self.validation_fraction < 1:
                raise ValueError("validation_fraction must be in (0, 1)")
            cut = int(round(len(y) * (1 - self.validation_fraction)))
            if cut < 1 or cut >= len(y):
                raise ValueError("too few rows to split off a validation part")
            X, X_val, y, y_val = X[:cut], X[cut:], y[:cut], y[cut:]
        else:
            X_val, y_val = check_X_y(*eval_set, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        norm = Normalization.fit(np.concatenate([X.ravel(), y]))
        mdp = self._mdp()
        self.policy_ = value_iteration(mdp)
        template = LstmConfig(hidden_units=self.hidden_units, window_len=X.shape[1],
                              learning_rate=self.learning_rate)
        params = AlcParams(self.delta, mdp, self.policy_, int(self.random_state or 0), template)
        self.search_ = run_alc(_dataset(X, y, X_val, y_val, norm), params)
        self.model_ = self.search_.outcome.model
        self.best_config_ = self.search_.chosen_config
        self.best_aare_ = self.search_.aare
        return self
