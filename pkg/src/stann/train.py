"""Normalisation, optimisation and evaluation loops."""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import metrics
from .baselines import ar_forecast_panel, naive_forecast
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .model import LossConfig, ModelConfig, StannModel, build_relation_tensor

log = logging.getLogger(__name__)


# -- scaling -----------------------------------------------------------------


@dataclass
class IqrScaler:
    median: np.ndarray
    iqr: np.ndarray

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.median) / self.iqr

    def inverse(self, Xn) -> np.ndarray:
        return np.asarray(Xn, dtype=float) * self.iqr + self.median


def iqr_normalize(X, names: Sequence[str] | None = None) -> tuple[np.ndarray, IqrScaler]:
    """Centre on the median and divide by the interquartile range, per series.

    Quartiles use linear interpolation between order statistics.
    """
    X = np.asarray(X, dtype=float)
    q25, med, q75 = np.percentile(X, [25.0, 50.0, 75.0], axis=0, method="linear")
    iqr = q75 - q25
    bad = np.flatnonzero(np.atleast_1d(iqr <= 0).reshape(-1))
    if bad.size:
        label = [names[i] for i in bad] if names is not None else bad.tolist()
        raise DataError(f"series {label} has zero interquartile range (constant series)")
    scaler = IqrScaler(median=med, iqr=iqr)
    return scaler.transform(X), scaler


def iqr_denormalize(Xn, scaler: IqrScaler) -> np.ndarray:
    return scaler.inverse(Xn)


# -- optimiser -----------------------------------------------------------------


class Adam:
    """Adam with bias correction over a fixed list of tensors."""

    def __init__(self, params: Sequence[dc.Tensor], betas=(0.9, 0.999), eps: float = 1e-8, scales: Sequence[float] | None = None):
        self.params = list(params)
        self.scales = [1.0] * len(self.params) if scales is None else [float(s) for s in scales]
        if len(self.scales) != len(self.params):
            raise ValueError("one learning-rate scale per parameter")
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rejected = 0

    def step(self, lr: float) -> bool:
        """Apply one update from the params' ``grad`` buffers.

        Returns False (and leaves everything untouched) if any gradient is
        non-finite.
        """
        if not all(np.isfinite(p.grad).all() for p in self.params):
            self.rejected += 1
            return False
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v, s in zip(self.params, self.m, self.v, self.scales):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= s * lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def lr_schedule(step: int, lr_max: float, lr_min: float = 0.0, period: int = 100, mult: float = 1.0, decay: float = 1.0) -> float:
    """Cosine annealing with warm restarts.

    Cycle ``c`` lasts ``period * mult**c`` steps and starts at
    ``lr_max * decay**c``.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    cycle, start, length = 0, 0, float(period)
    while step >= start + length:
        start += length
        length *= mult
        cycle += 1
    progress = (step - start) / length
    top = lr_max * decay**cycle
    return lr_min + (top - lr_min) * (1.0 + math.cos(math.pi * progress)) / 2.0


# -- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 1500
    lr: float = 0.01
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sched_period: int = 500
    sched_mult: float = 1.0
    lr_decay: float = 0.5
    lam: float = 0.5
    gamma: float = 0.0
    delta: str = "mse"
    N: int = 8
    max_lag: int = 64
    kappa: float = 0.01
    variant: str = "plain"
    train_window: int = 500
    seed: int = 0
    actm_seed: int = -1
    blocks: int = 2
    layers: int = 2
    width: int = 32
    stack: str = "residual"
    h_g: str = "tanh"
    h_d: str = "identity"
    actm_hidden: int = 0
    actm_bias: float = 0.0
    max_norm: float = 0.0
    actm_lr_mult: float = 1.0
    relation_threshold: float = 0.0
    batch_size: int = 0
    tau: int = 21
    jobs: int = 1

    def __post_init__(self):
        positive = ("epochs", "lr", "adam_eps", "sched_period", "sched_mult", "lr_decay", "lam", "N", "max_lag", "kappa", "train_window", "tau", "jobs", "actm_lr_mult")
        for k in positive:
            v = getattr(self, k)
            if k == "epochs" and v == 0:
                continue
            if not v > 0:
                raise ConfigError(f"{k} must be positive, got {v!r}")
        if self.gamma < 0 or self.lr_min < 0 or self.batch_size < 0:
            raise ConfigError("gamma, lr_min and batch_size must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def model_config(self, n: int) -> ModelConfig:
        return ModelConfig(
            n=n,
            N=self.N,
            R=1,
            variant=self.variant,
            max_lag=self.max_lag,
            kappa=self.kappa,
            h_g=self.h_g,
            h_d=self.h_d,
            stack=self.stack,
            blocks=self.blocks,
            layers=self.layers,
            width=self.width,
            actm_hidden=self.actm_hidden,
            actm_bias=self.actm_bias,
            max_norm=self.max_norm,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, gamma=self.gamma, delta=self.delta)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


# -- fitting -------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: StannModel
    scaler: IqrScaler
    last_obs: np.ndarray
    losses: list[float] = field(default_factory=list)

    def forecast(self, tau: int) -> np.ndarray:
        """Forecast in original price units, shape (tau, n)."""
        xn = self.model.forecast(self.last_obs, tau)[:, :, 0]
        return self.scaler.inverse(xn)

    def extras(self) -> dict[str, np.ndarray]:
        return {
            "scaler.median": self.scaler.median,
            "scaler.iqr": self.scaler.iqr,
            "last_obs": self.last_obs,
            "losses": np.asarray(self.losses if self.losses else [np.nan]),
        }

    @classmethod
    def from_parts(cls, model: StannModel, extras: dict[str, np.ndarray]) -> "Checkpoint":
        losses = [float(v) for v in extras.get("losses", []) if np.isfinite(v)]
        return cls(model, IqrScaler(extras["scaler.median"], extras["scaler.iqr"]), extras["last_obs"], losses)


def init_model(Xn: np.ndarray, config: TrainConfig) -> StannModel:
    T, n = Xn.shape
    relation = build_relation_tensor(Xn, config.relation_threshold) if config.variant != "D" else None
    actm_seed = None if config.actm_seed < 0 else config.actm_seed
    return StannModel(config.model_config(n), T, relation=relation, seed=config.seed, actm_seed=actm_seed)


def fit(X_train, config: TrainConfig, names: Sequence[str] | None = None) -> Checkpoint:
    """Jointly optimise latents and every factor against the model loss.

    ``X_train`` holds raw prices (T, n); scaling statistics come from it alone.
    """
    X = np.asarray(X_train, dtype=float)
    if X.ndim != 2 or X.shape[0] < 8:
        raise DataError("fit needs a (T, n) panel with T >= 8")
    if not np.isfinite(X).all():
        raise DataError("training data contains non-finite values")
    Xn, scaler = iqr_normalize(X, names)
    model = init_model(Xn, config)
    loss_cfg = config.loss_config()
    named = model.parameters()
    params = list(named.values())
    scales = [config.actm_lr_mult if k.startswith("actm.") else 1.0 for k in named]
    opt = Adam(params, (config.beta1, config.beta2), config.adam_eps, scales)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    losses: list[float] = []
    good = model.snapshot()
    T = Xn.shape[0]
    for epoch in range(config.epochs):
        rows = None
        if config.batch_size and config.batch_size < T - 1:
            start = int(rng.integers(0, T - config.batch_size))
            rows = np.zeros(T - 1, dtype=bool)
            rows[start : start + config.batch_size] = True
        dc.zero_grad(params)
        try:
            loss = model.loss(Xn, loss_cfg, rows)
        except NumericError:
            model.restore(good)
            ck = Checkpoint(model, scaler, Xn[-1].copy(), losses)
            raise DivergenceError(f"loss became non-finite at epoch {epoch}", ck) from None
        losses.append(float(loss.data))
        good = model.snapshot()
        dc.backward(loss)
        lr = lr_schedule(epoch, config.lr, config.lr_min, config.sched_period, config.sched_mult, config.lr_decay)
        if not opt.step(lr):
            log.warning("epoch %d: non-finite gradient, step rejected", epoch)
        model.project()
    model.fitted = True
    return Checkpoint(model, scaler, Xn[-1].copy(), losses)


# -- rolling-origin evaluation -------------------------------------------------


@dataclass(frozen=True)
class CvSplit:
    origin: int
    train: slice
    test: slice


def cv_splits(T: int, window: int, tau: int, n_origins: int) -> list[CvSplit]:
    """Origins advance by ``tau``; the last test slice ends at ``T``."""
    if n_origins < 1:
        raise ValueError("n_origins must be >= 1")
    if T < window + tau * n_origins:
        raise DataError(f"need T >= window + tau * n_origins = {window + tau * n_origins}, got T={T}")
    first = T - tau * n_origins
    return [CvSplit(o, slice(o - window, o), slice(o, o + tau)) for o in range(first, T, tau)]


@dataclass
class CvResult:
    model: str
    splits: list[CvSplit]
    forecasts: list[np.ndarray]
    table: list[dict]

    def per_origin(self, key: str) -> np.ndarray:
        """Metric averaged over series for each origin."""
        vals = {}
        for row in self.table:
            vals.setdefault(row["origin"], []).append(row[key])
        return np.array([np.mean(v) for _, v in sorted(vals.items())])


def score_forecasts(X, splits: Sequence[CvSplit], forecasts: Sequence[np.ndarray]) -> list[dict]:
    X = np.asarray(X, dtype=float)
    rows = []
    for split, fc in zip(splits, forecasts):
        for i in range(X.shape[1]):
            insample = X[split.train, i]
            actual = X[split.test, i]
            frame = metrics.EvalFrame(insample, actual, fc[:, i])
            rows.append(
                {
                    "origin": split.origin,
                    "series": i,
                    "mase": metrics.mase(frame),
                    "theil_u": metrics.theil_u(frame),
                    "mda": metrics.mda(frame, insample[-1]),
                }
            )
    return rows


def _stann_job(args):
    X_train, config = args
    return fit(X_train, config).forecast(config.tau)


def _map(fn, jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, jobs_args))
    return [fn(a) for a in jobs_args]


def stann_forecaster(config: TrainConfig) -> Callable:
    def forecaster(splits, X):
        return _map(_stann_job, [(X[s.train], config) for s in splits], config.jobs)

    return forecaster


def naive_forecaster(tau: int) -> Callable:
    def forecaster(splits, X):
        return [naive_forecast(X[s.train], tau) for s in splits]

    return forecaster


def ar_forecaster(tau: int, lag: int | None = None) -> Callable:
    def forecaster(splits, X):
        return [ar_forecast_panel(X[s.train], tau, lag) for s in splits]

    return forecaster


def evaluate_forecaster(X, splits: Sequence[CvSplit], forecaster: Callable, name: str) -> CvResult:
    X = np.asarray(X, dtype=float)
    forecasts = [np.asarray(f, dtype=float) for f in forecaster(splits, X)]
    return CvResult(name, list(splits), forecasts, score_forecasts(X, splits, forecasts))


def rolling_origin_cv(X, config: TrainConfig, n_origins: int) -> CvResult:
    """Fit on each window, forecast ``tau`` steps in price units and score."""
    X = np.asarray(X, dtype=float)
    splits = cv_splits(X.shape[0], config.train_window, config.tau, n_origins)
    return evaluate_forecaster(X, splits, stann_forecaster(config), "stann")


# -- hyper-parameter search ----------------------------------------------------


def random_search(space: dict, budget: int, objective: Callable[[dict], float], seed: int = 0):
    """Uniform random search; returns ``(best_params, best_score, history)``.

    ``space`` maps a name to ``(low, high)`` floats, ``(low, high)`` ints
    (sampled inclusively) or a list of choices.
    """
    if not space:
        raise ValueError("empty search space")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(budget):
        sample = {}
        for name in sorted(space):
            spec = space[name]
            if isinstance(spec, list):
                sample[name] = spec[int(rng.integers(len(spec)))]
            else:
                lo, hi = spec
                if isinstance(lo, int) and isinstance(hi, int):
                    sample[name] = int(rng.integers(lo, hi + 1))
                else:
                    sample[name] = float(rng.uniform(lo, hi))
        history.append((sample, float(objective(sample))))
    best = min(range(len(history)), key=lambda i: history[i][1])
    return history[best][0], history[best][1], history


DEFAULT_SPACE = {
    "lam": (0.01, 1.0),
    "lr": (1e-3, 3e-2),
    "N": (2, 16),
    "train_window": (252, 756),
}


def validation_objective(X_train, base: TrainConfig) -> Callable[[dict], float]:
    """Mean MASE on the last ``tau`` steps of the training slice."""
    X_train = np.asarray(X_train, dtype=float)

    def objective(params: dict) -> float:
        cfg = replace(base, **params)
        window = min(cfg.train_window, X_train.shape[0] - cfg.tau)
        split = CvSplit(X_train.shape[0] - cfg.tau, slice(X_train.shape[0] - cfg.tau - window, X_train.shape[0] - cfg.tau), slice(X_train.shape[0] - cfg.tau, X_train.shape[0]))
        try:
            fc = fit(X_train[split.train], cfg).forecast(cfg.tau)
        except (NumericError, DataError) as exc:
            warnings.warn(f"candidate {params} failed: {exc}")
            return math.inf
        rows = score_forecasts(X_train, [split], [fc])
        return float(np.mean([r["mase"] for r in rows]))

    return objective
