"""Domain-conditioned VP noise predictor trained by denoising score matching.

The network is a small MLP written against numpy with hand-derived
backpropagation. Inputs are the noisy point ``y``, a feature expansion of
the log-SNR of ``alpha_bar`` and a learned embedding of the domain token
(source, target or null).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import check_batch, make_rng

SOURCE, TARGET, NULL = 0, 1, 2
_TOKENS = {"source": SOURCE, "target": TARGET, "null": NULL}

LOG_SNR_CLIP = 12.0
_MAGIC = b"DSBMLP\0\0"
_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


def domain_token(c):
    """Normalize a token (name, int or array) to integer codes."""
    if isinstance(c, str):
        try:
            return _TOKENS[c]
        except KeyError:
            raise ValueError(f"unknown domain token {c!r}") from None
    arr = np.asarray(c, dtype=int)
    if np.any((arr < 0) | (arr > 2)):
        raise ValueError("domain tokens must be 0 (source), 1 (target) or 2 (null)")
    return int(arr) if arr.ndim == 0 else arr


def _log_snr(alpha_bar, one_minus=None):
    ab = np.asarray(alpha_bar, dtype=float)
    om = 1.0 - ab if one_minus is None else np.asarray(one_minus, dtype=float)
    with np.errstate(divide="ignore"):
        lam = np.log(ab) - np.log(om)
    return np.clip(lam, -LOG_SNR_CLIP, LOG_SNR_CLIP)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Mlp:
    """Conditional noise predictor ``eps(y, alpha_bar, c)``.

    Parameters live in one flat float64 vector; :meth:`unpack` returns views
    into it, so optimizers and checkpoints work on ``params`` directly.
    """

    def __init__(self, dim=2, hidden=(64, 64), n_freq=4, emb_dim=4, seed=0, params=None):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freq = int(n_freq)
        self.emb_dim = int(emb_dim)
        self.layout = self._layout()
        size = sum(int(np.prod(s)) for _, s in self.layout)
        if params is None:
            self.params = np.zeros(size)
            self._init(np.random.default_rng(seed))
        else:
            params = np.asarray(params, dtype=float)
            if params.shape != (size,):
                raise ValueError(f"expected {size} parameters, got {params.shape}")
            self.params = params.copy()

    @property
    def n_features(self):
        return self.dim + 1 + 2 * self.n_freq + self.emb_dim

    def _layout(self):
        widths = (self.n_features,) + self.hidden + (self.dim,)
        layout = [("emb", (3, self.emb_dim))]
        for k in range(len(widths) - 1):
            layout.append((f"W{k}", (widths[k], widths[k + 1])))
            layout.append((f"b{k}", (widths[k + 1],)))
        return layout

    def unpack(self, flat=None):
        flat = self.params if flat is None else flat
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = flat[i:i + n].reshape(shape)
            i += n
        return out

    def _init(self, rng):
        p = self.unpack()
        p["emb"][:] = rng.standard_normal(p["emb"].shape)
        n_layers = len(self.hidden) + 1
        for k in range(n_layers):
            W = p[f"W{k}"]
            if k == n_layers - 1:
                W[:] = 0.0  # zero output layer: untrained model predicts 0
            else:
                W[:] = rng.standard_normal(W.shape) * np.sqrt(2.0 / W.shape[0])

    def architecture(self):
        return {"dim": self.dim, "hidden": list(self.hidden),
                "n_freq": self.n_freq, "emb_dim": self.emb_dim}

    def copy(self):
        return Mlp(**self.architecture(), params=self.params)

    def _features(self, y, alpha_bar, c, one_minus=None):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[None, :]
        if y.shape[1] != self.dim:
            raise ValueError(f"input has dimension {y.shape[1]}, model expects {self.dim}")
        n = len(y)
        lam = np.broadcast_to(_log_snr(alpha_bar, one_minus), (n,))
        freqs = np.arange(1, self.n_freq + 1) * (np.pi / (2 * LOG_SNR_CLIP))
        ang = lam[:, None] * freqs[None, :]
        c = np.broadcast_to(domain_token(c), (n,))
        return y, c, [lam[:, None] / LOG_SNR_CLIP, np.sin(ang), np.cos(ang)]

    def _forward(self, flat, y, alpha_bar, c, one_minus=None):
        p = self.unpack(flat)
        y, c, feats = self._features(y, alpha_bar, c, one_minus)
        h = np.concatenate([y] + feats + [p["emb"][c]], axis=1)
        cache = [(h, None)]
        n_layers = len(self.hidden) + 1
        for k in range(n_layers):
            z = h @ p[f"W{k}"] + p[f"b{k}"]
            if k < n_layers - 1:
                s = _sigmoid(z)
                h = z * s
                cache.append((h, (z, s)))
            else:
                h = z
        return h, cache, c

    def forward(self, y, alpha_bar, c, one_minus=None):
        """Predicted noise for inputs ``y`` at level ``alpha_bar`` under token ``c``."""
        return self._forward(self.params, y, alpha_bar, c, one_minus)[0]

    __call__ = forward

    def loss_and_grad(self, y, alpha_bar, c, eps, flat=None):
        """Mean squared noise-prediction error and its exact gradient."""
        flat = self.params if flat is None else flat
        out, cache, c = self._forward(flat, y, alpha_bar, c)
        n = len(out)
        resid = out - eps
        loss = float((resid * resid).sum() / n)
        grad = np.zeros_like(flat)
        g = self.unpack(grad)
        p = self.unpack(flat)
        delta = 2.0 * resid / n
        n_layers = len(self.hidden) + 1
        for k in reversed(range(n_layers)):
            h_in = cache[k][0]
            g[f"W{k}"][:] = h_in.T @ delta
            g[f"b{k}"][:] = delta.sum(axis=0)
            delta = delta @ p[f"W{k}"].T
            if k > 0:
                z, s = cache[k][1]
                delta = delta * (s * (1.0 + z * (1.0 - s)))
        np.add.at(g["emb"], c, delta[:, -self.emb_dim:])
        return loss, grad

    def save(self, path):
        header = json.dumps(self.architecture(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<II", _VERSION, len(header)))
            fh.write(header)
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if raw[:8] != _MAGIC:
            raise ValueError(f"{path} is not a denoiser checkpoint")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = json.loads(raw[16:16 + hlen])
        params = np.frombuffer(raw[16 + hlen:], dtype="<f8")
        return cls(**arch, params=params)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    cond_dropout: float = 0.1
    alpha_bar_range: tuple = (0.02, 0.999)
    seed: int = 0
    hidden: tuple = (64, 64)
    betas: tuple = field(default=(0.9, 0.999))

    def __post_init__(self):
        if not 0 <= self.cond_dropout < 1:
            raise ValueError("cond_dropout must lie in [0, 1)")
        lo, hi = self.alpha_bar_range
        if not 0 < lo < hi <= 1:
            raise ValueError("alpha_bar_range must be an interval inside (0, 1]")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class DsmDraw:
    """One minibatch of the denoising objective."""

    y: np.ndarray
    alpha_bar: np.ndarray
    one_minus: np.ndarray
    c: np.ndarray
    eps: np.ndarray


def draw_dsm_batch(batch0, batch1, size, cfg, rng):
    """Sample ``(y, alpha_bar, c, eps)`` for the conditional DSM loss.

    The domain token is drawn uniformly from {source, target}, ``x`` from the
    matching batch, log-SNR uniformly over ``cfg.alpha_bar_range``; the token
    is then replaced by null with probability ``cfg.cond_dropout``.
    """
    c = rng.integers(0, 2, size=size)
    i0 = rng.integers(0, len(batch0), size=size)
    i1 = rng.integers(0, len(batch1), size=size)
    x = np.where((c == SOURCE)[:, None], batch0[i0], batch1[i1])
    lo, hi = _log_snr(np.array(cfg.alpha_bar_range, dtype=float))
    lam = lo + (hi - lo) * rng.random(size)
    alpha_bar = _sigmoid(lam)
    one_minus = _sigmoid(-lam)
    eps = rng.standard_normal(x.shape)
    y = np.sqrt(alpha_bar)[:, None] * x + np.sqrt(one_minus)[:, None] * eps
    drop = rng.random(size) < cfg.cond_dropout
    c = np.where(drop, NULL, c)
    return DsmDraw(y, alpha_bar, one_minus, c, eps)


def dsm_loss(model, draw, with_grad=True):
    """Conditional DSM loss on a drawn minibatch.

    ``model`` only needs ``forward(y, alpha_bar, c)`` when ``with_grad`` is
    false, which lets tests plug in oracle predictors.
    """
    if with_grad:
        return model.loss_and_grad(draw.y, draw.alpha_bar, draw.c, draw.eps)
    out = model.forward(draw.y, draw.alpha_bar, draw.c)
    return float(((out - draw.eps) ** 2).sum() / len(out))


def train(dataset0, dataset1, cfg=None, model=None, return_history=False):
    """Fit a conditional noise predictor on two domains with Adam.

    Deterministic given ``cfg.seed``. ``steps = 0`` returns the initialized
    model unchanged.
    """
    cfg = TrainConfig() if cfg is None else cfg
    dataset0 = check_batch(dataset0, "dataset0")
    dataset1 = check_batch(dataset1, "dataset1", d=dataset0.shape[1])
    if model is None:
        model = Mlp(dim=dataset0.shape[1], hidden=cfg.hidden,
                    seed=int(make_rng(cfg.seed, "denoiser/init").integers(2**32)))
    rng = make_rng(cfg.seed, "denoiser/train")
    b1, b2 = cfg.betas
    m = np.zeros_like(model.params)
    v = np.zeros_like(model.params)
    history = np.empty(cfg.steps)
    for step in range(1, cfg.steps + 1):
        draw = draw_dsm_batch(dataset0, dataset1, cfg.batch_size, cfg, rng)
        loss, grad = dsm_loss(model, draw)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(step, loss)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        model.params -= cfg.lr * mhat / (np.sqrt(vhat) + 1e-8)
        history[step - 1] = loss
    return (model, history) if return_history else model


class ConditionalDenoiser(BaseEstimator):
    """Estimator wrapper around :func:`train`.

    ``fit(X, y)`` takes points ``X`` and domain labels ``y`` (0 = source,
    1 = target).
    """

    def __init__(self, hidden=(64, 64), steps=5000, batch_size=256, learning_rate=1e-3,
                 cond_dropout=0.1, alpha_bar_range=(0.02, 0.999), seed=0):
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.cond_dropout = cond_dropout
        self.alpha_bar_range = alpha_bar_range
        self.seed = seed

    def _config(self):
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.learning_rate,
                           cond_dropout=self.cond_dropout,
                           alpha_bar_range=tuple(self.alpha_bar_range), seed=self.seed,
                           hidden=tuple(self.hidden))

    def fit(self, X, y):
        X0, X1 = split_domains(X, y)
        self.model_, self.loss_history_ = train(X0, X1, self._config(), return_history=True)
        self.n_features_in_ = X0.shape[1]
        return self

    def predict_noise(self, Y, alpha_bar, c):
        check_is_fitted(self, "model_")
        return self.model_.forward(Y, alpha_bar, c)

    def score(self, X, y):
        """Negative held-out DSM loss (higher is better)."""
        check_is_fitted(self, "model_")
        X0, X1 = split_domains(X, y)
        cfg = self._config()
        draw = draw_dsm_batch(X0, X1, max(len(X0) + len(X1), 1024), cfg,
                              make_rng(self.seed, "denoiser/score"))
        return -dsm_loss(self.model_, draw, with_grad=False)


def split_domains(X, y):
    X = check_batch(X, "X")
    y = np.asarray(y).ravel()
    if len(y) != len(X):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)} labels")
    X0, X1 = X[y == SOURCE], X[y == TARGET]
    if len(X0) == 0 or len(X1) == 0:
        raise ValueError("both domains (labels 0 and 1) need at least one sample")
    return X0, X1
