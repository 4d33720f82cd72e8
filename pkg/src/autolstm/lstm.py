"""Stacked LSTM with a linear readout, trained one window at a time.

Parameters live in a single flat float64 vector; :func:`param_layout` maps
names such as ``"layer0.W"`` to slices of it.  Gate blocks inside every
``W``/``R``/``b`` are ordered input, forget, output, candidate.
"""
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Normalization
from .errors import DomainError, TrainingError
from .metrics import compute_aare

GATES = ("input", "forget", "output", "candidate")


@dataclass(frozen=True)
class LstmConfig:
    hidden_layers: int = 1
    epochs: int = 100
    hidden_units: int = 32
    window_len: int = 12
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 1:
            raise DomainError(f"hidden_layers must be >= 1, got {self.hidden_layers}")
        if self.epochs < 1:
            raise DomainError(f"epochs must be >= 1, got {self.epochs}")
        if self.hidden_units < 1:
            raise DomainError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if self.window_len < 1:
            raise DomainError(f"window_len must be >= 1, got {self.window_len}")
        if not self.learning_rate > 0:
            raise DomainError(f"learning_rate must be positive, got {self.learning_rate}")

    def replace(self, **changes):
        return replace(self, **changes)


def derive_seed(base_seed, *parts):
    """Stable 63-bit seed from a base seed and any number of labels."""
    text = ":".join(str(p) for p in (base_seed, *parts))
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big") >> 1


def param_layout(hidden_layers, hidden_units, input_size=1):
    """Ordered ``name -> (start, stop, shape)`` for the flat parameter vector."""
    U = hidden_units
    layout = {}
    offset = 0

    def add(name, shape):
        nonlocal offset
        size = int(np.prod(shape))
        layout[name] = (offset, offset + size, shape)
        offset += size

    for layer in range(hidden_layers):
        d = input_size if layer == 0 else U
        add(f"layer{layer}.W", (4 * U, d))
        add(f"layer{layer}.R", (4 * U, U))
        add(f"layer{layer}.b", (4 * U,))
    add("readout.w", (U,))
    add("readout.b", (1,))
    return layout


def param_count(hidden_layers, hidden_units, input_size=1):
    U = hidden_units
    first = 4 * (U * input_size + U * U + U)
    stacked = 4 * (2 * U * U + U) * (hidden_layers - 1)
    return first + stacked + U + 1


def _views(flat, layout):
    return {name: flat[a:b].reshape(shape) for name, (a, b, shape) in layout.items()}


@dataclass
class TrainedModel:
    config: LstmConfig
    weights: np.ndarray
    normalization: Normalization | None = None
    layout: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.layout = param_layout(self.config.hidden_layers, self.config.hidden_units)
        expected = param_count(self.config.hidden_layers, self.config.hidden_units)
        if self.weights.shape != (expected,):
            raise DomainError(f"expected {expected} weights, got shape {self.weights.shape}")

    @property
    def params(self):
        return _views(self.weights, self.layout)

    def gate(self, layer, gate, kind="W"):
        """View of one gate block; ``kind`` is ``"W"``, ``"R"`` or ``"b"``."""
        U = self.config.hidden_units
        k = GATES.index(gate)
        return self.params[f"layer{layer}.{kind}"][k * U:(k + 1) * U]

    def predict(self, X):
        """Normalised next-step predictions for a batch of normalised windows."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([forward(self, x) for x in X])

    def predict_original(self, X):
        """Predictions in original units for windows of raw speeds."""
        if self.normalization is None:
            raise DomainError("model has no normalization parameters")
        norm = self.normalization
        return norm.denormalize(self.predict(norm.normalize(np.asarray(X, dtype=float))))

    def to_dict(self):
        return {
            "format": "autolstm.TrainedModel/1",
            "config": asdict(self.config),
            "normalization": None if self.normalization is None else {
                "min": self.normalization.minimum, "max": self.normalization.maximum},
            "weights": {name: self.weights[a:b].tolist()
                        for name, (a, b, _) in self.layout.items()},
        }

    @classmethod
    def from_dict(cls, d):
        config = LstmConfig(**d["config"])
        layout = param_layout(config.hidden_layers, config.hidden_units)
        flat = np.concatenate([np.asarray(d["weights"][name], dtype=float) for name in layout])
        norm = d.get("normalization")
        return cls(config, flat, None if norm is None else Normalization(norm["min"], norm["max"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainingOutcome:
    model: TrainedModel | None
    aare: float
    train_seconds: float
    epoch_seconds: float
    loss_history: list = field(default_factory=list)


def init_weights(config, rng=None):
    """Scaled-uniform initialisation with forget-gate bias 1.

    Deterministic in ``config.seed`` unless an explicit generator is passed.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    layout = param_layout(config.hidden_layers, config.hidden_units)
    flat = np.zeros(param_count(config.hidden_layers, config.hidden_units))
    views = _views(flat, layout)
    U = config.hidden_units
    for name, arr in views.items():
        if name.endswith(".b"):
            continue
        fan_out, fan_in = (arr.shape[0], arr.shape[1]) if arr.ndim == 2 else (1, arr.shape[0])
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        arr[...] = rng.uniform(-bound, bound, arr.shape)
    for layer in range(config.hidden_layers):
        views[f"layer{layer}.b"][U:2 * U] = 1.0
    return TrainedModel(config, flat)


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _forward_cached(p, x, hidden_layers, U):
    L = len(x)
    inp = np.asarray(x, dtype=float).reshape(L, 1)
    caches = []
    for layer in range(hidden_layers):
        W, R, b = p[f"layer{layer}.W"], p[f"layer{layer}.R"], p[f"layer{layer}.b"]
        Zx = inp @ W.T + b
        H = np.zeros((L + 1, U))
        C = np.zeros((L + 1, U))
        G = np.empty((L, 4 * U))
        TC = np.empty((L, U))
        for t in range(L):
            z = Zx[t] + R @ H[t]
            g = G[t]
            g[:3 * U] = _sigmoid(z[:3 * U])
            g[3 * U:] = np.tanh(z[3 * U:])
            C[t + 1] = g[U:2 * U] * C[t] + g[:U] * g[3 * U:]
            TC[t] = np.tanh(C[t + 1])
            H[t + 1] = g[2 * U:3 * U] * TC[t]
        caches.append((inp, H, C, G, TC))
        inp = H[1:]
    y = float(p["readout.w"] @ inp[-1] + p["readout.b"][0])
    return y, caches


def forward(model, window):
    """Next-step prediction (normalised scale) for one window of length L."""
    window = np.asarray(window, dtype=float).ravel()
    if window.size != model.config.window_len:
        raise DomainError(f"window length {window.size} != configured {model.config.window_len}")
    y, _ = _forward_cached(model.params, window, model.config.hidden_layers,
                           model.config.hidden_units)
    return y


def loss_and_grad(model, window, target, grad=None):
    """Squared error of one window and its gradient w.r.t. the flat weights."""
    cfg = model.config
    U = cfg.hidden_units
    p = model.params
    y, caches = _forward_cached(p, window, cfg.hidden_layers, U)
    err = y - target
    if grad is None:
        grad = np.zeros_like(model.weights)
    g = _views(grad, model.layout)
    dy = 2.0 * err
    top_h = caches[-1][1][-1]
    g["readout.w"][...] = dy * top_h
    g["readout.b"][0] = dy
    L = len(window)
    dH_above = np.zeros((L, U))
    dH_above[-1] = dy * p["readout.w"]
    for layer in reversed(range(cfg.hidden_layers)):
        inp, H, C, G, TC = caches[layer]
        W, R = p[f"layer{layer}.W"], p[f"layer{layer}.R"]
        dZ = np.empty((L, 4 * U))
        dh_next = np.zeros(U)
        dc_next = np.zeros(U)
        for t in reversed(range(L)):
            gt = G[t]
            i, f, o, c_hat = gt[:U], gt[U:2 * U], gt[2 * U:3 * U], gt[3 * U:]
            dh = dH_above[t] + dh_next
            tc = TC[t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dZ[t]
            dz[:U] = dc * c_hat * i * (1.0 - i)
            dz[U:2 * U] = dc * C[t] * f * (1.0 - f)
            dz[2 * U:3 * U] = dh * tc * o * (1.0 - o)
            dz[3 * U:] = dc * i * (1.0 - c_hat * c_hat)
            dc_next = dc * f
            dh_next = R.T @ dz
        g[f"layer{layer}.W"][...] = dZ.T @ inp
        g[f"layer{layer}.R"][...] = dZ.T @ H[:-1]
        g[f"layer{layer}.b"][...] = dZ.sum(axis=0)
        if layer:
            dH_above = dZ @ W
    return err * err, grad


class Adam:
    def __init__(self, size, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        lr_t = self.lr * math.sqrt(1 - self.beta2 ** self.t) / (1 - self.beta1 ** self.t)
        params -= lr_t * self.m / (np.sqrt(self.v) + self.eps)


def train(config, dataset):
    """Train a fresh model for exactly ``config.epochs`` passes over the training windows.

    Returns a :class:`TrainingOutcome` whose AARE is measured on the test
    windows in original units.
    """
    if dataset.n_train < 1:
        raise DomainError("dataset has no training windows")
    if dataset.window_len != config.window_len:
        raise DomainError(f"dataset window_len {dataset.window_len} != config {config.window_len}")
    rng = np.random.default_rng(config.seed)
    model = init_weights(config, rng)
    model.normalization = dataset.normalization
    opt = Adam(model.weights.size, config.learning_rate)
    grad = np.zeros_like(model.weights)
    X, y = dataset.X_train, dataset.y_train
    history = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        total = 0.0
        # overflow is caught below as a non-finite loss
        with np.errstate(over="ignore", invalid="ignore"):
            for idx in rng.permutation(len(y)):
                loss, _ = loss_and_grad(model, X[idx], y[idx], grad)
                total += loss
                opt.step(model.weights, grad)
        mean_loss = total / len(y)
        if not math.isfinite(mean_loss) or not np.all(np.isfinite(model.weights)):
            raise TrainingError("loss diverged to a non-finite value", epoch)
        history.append(mean_loss)
    elapsed = time.perf_counter() - start
    aare = evaluate_aare(model, dataset) if dataset.n_test else float("nan")
    return TrainingOutcome(model, aare, elapsed, elapsed / config.epochs, history)


def evaluate_aare(model, dataset):
    pred = dataset.normalization.denormalize(model.predict(dataset.X_test))
    return compute_aare(dataset.raw_test_targets, pred)


def gradient_check(config, window, target, step=1e-5):
    """Max relative error between BPTT and central finite differences.

    Relative error per parameter is ``|a - n| / max(|a|, |n|, 1e-6)`` so that
    parameters with a vanishing gradient do not dominate.
    """
    model = init_weights(config)
    window = np.asarray(window, dtype=float)
    _, analytic = loss_and_grad(model, window, target)
    analytic = analytic.copy()
    numeric = np.empty_like(analytic)
    w = model.weights
    for k in range(w.size):
        orig = w[k]
        w[k] = orig + step
        up = (forward(model, window) - target) ** 2
        w[k] = orig - step
        down = (forward(model, window) - target) ** 2
        w[k] = orig
        numeric[k] = (up - down) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def calibrate_epoch_times(n, probe_dataset, probe_epochs=3, template=None):
    """Mean wall-clock seconds per epoch for 1..n hidden layers."""
    if probe_epochs < 3:
        raise DomainError("probe_epochs must be >= 3")
    template = template or LstmConfig(window_len=probe_dataset.window_len)
    times = {}
    for h in range(1, n + 1):
        out = train(template.replace(hidden_layers=h, epochs=probe_epochs), probe_dataset)
        times[h] = out.epoch_seconds
    return times
