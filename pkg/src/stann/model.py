"""Dynamic-factor-graph forecaster with learned latent states.

Shapes used throughout: ``T`` time steps, ``n`` series, ``N`` latent width,
``R`` relation types, ``m`` observed features per series (1 for prices).

* Latent states ``Z`` (T, n, N) are free parameters.
* The decoder maps ``Z[t, i]`` to the expected variation ``x[t, i] - x[t-1, i]``.
* The dynamic factor mixes each past state spatially,
  ``Z @ theta0 + sum_r A_r @ Z @ theta_r`` with ``A_r`` taken from the prior
  relation tensor (``plain``), ``gamma * prior`` (``R``) or ``gamma`` alone
  (``D``), attends over the mixed history with ACTM and passes the result
  through a residual stack and ``h_g``.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import actm as actm_mod
from . import diffcore as dc
from .diffcore import Tensor
from .errors import DataError, NumericError, ShapeError

VARIANTS = ("plain", "R", "D")
CHECKPOINT_HEADER = "STANN v1"


@dataclass
class ModelConfig:
    n: int
    N: int = 8
    R: int = 1
    m: int = 1
    variant: str = "plain"
    max_lag: int = actm_mod.DEFAULT_MAX_LAG
    kappa: float = actm_mod.DEFAULT_KAPPA
    h_g: str = "tanh"
    h_d: str = "identity"
    stack: str = "residual"
    blocks: int = 2
    layers: int = 2
    width: int = 32
    actm_hidden: int = 0
    actm_bias: float = 0.0
    max_norm: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.stack not in ("residual", "linear"):
            raise ValueError(f"stack must be 'residual' or 'linear', got {self.stack!r}")
        for k in ("h_g", "h_d"):
            if getattr(self, k) not in dc.ACTIVATIONS:
                raise ValueError(f"{k}: unknown activation {getattr(self, k)!r}")
        if self.max_lag < 1:
            raise ValueError("max_lag must be >= 1")
        if self.max_norm < 0:
            raise ValueError("max_norm must be >= 0 (0 disables it)")
        if self.n < 1 or self.N < 1 or self.m < 1 or self.R < 0:
            raise ValueError("n, N, m must be positive and R non-negative")


@dataclass
class LossConfig:
    lam: float = 0.1
    gamma: float = 0.0
    delta: str = "mse"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.delta not in ("mse", "mae"):
            raise ValueError(f"delta must be 'mse' or 'mae', got {self.delta!r}")


def _glorot(rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape if shape is not None else (fan_in, fan_out))


class Dense:
    def __init__(self, fan_in: int, fan_out: int, rng):
        self.w = Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.add_bias(dc.matmul(x, self.w), self.b)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class ResidualStack:
    """Doubly residual stack of fully connected blocks.

    Each block reads the running residual, emits a backcast (subtracted from
    the residual) and a forecast (summed into the output).
    """

    def __init__(self, in_dim: int, out_dim: int, blocks: int = 2, layers: int = 2, width: int = 32, rng=None):
        rng = np.random.default_rng(rng)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.blocks = []
        for _ in range(blocks):
            hidden = [Dense(in_dim if j == 0 else width, width, rng) for j in range(layers)]
            self.blocks.append((hidden, Dense(width, in_dim, rng), Dense(width, out_dim, rng)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"stack input width {x.shape[-1]} != {self.in_dim}")
        out = None
        for hidden, backcast, forecast in self.blocks:
            h = x
            for layer in hidden:
                h = dc.relu(layer(h))
            x = x - backcast(h)
            f = forecast(h)
            out = f if out is None else out + f
        if out is None:
            out = Tensor(np.zeros(x.shape[:-1] + (self.out_dim,)))
        return out

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        for b, (hidden, backcast, forecast) in enumerate(self.blocks):
            for j, layer in enumerate(hidden):
                params.update(layer.parameters(f"{prefix}.block{b}.fc{j}"))
            params.update(backcast.parameters(f"{prefix}.block{b}.backcast"))
            params.update(forecast.parameters(f"{prefix}.block{b}.forecast"))
        return params


class LinearMap:
    """Single affine layer; stands in for the residual stack in ablations."""

    def __init__(self, in_dim: int, out_dim: int, rng=None):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.layer = Dense(in_dim, out_dim, np.random.default_rng(rng))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear input width {x.shape[-1]} != {self.in_dim}")
        return self.layer(x)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return self.layer.parameters(f"{prefix}.linear")


def _make_stack(cfg: ModelConfig, in_dim: int, out_dim: int, rng):
    if cfg.stack == "linear":
        return LinearMap(in_dim, out_dim, rng)
    return ResidualStack(in_dim, out_dim, cfg.blocks, cfg.layers, cfg.width, rng)


def build_relation_tensor(X, threshold: float = 0.0) -> np.ndarray:
    """Clamped Pearson correlations as an ``(n, 1, n)`` relation prior."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 3:
        X = X[:, :, 0]
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("need at least 2 observations per series")
    centred = X - X.mean(axis=0)
    norms = np.sqrt((centred**2).sum(axis=0))
    n = X.shape[1]
    W = np.zeros((n, 1, n))
    flat = norms <= 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0))
    if flat.any():
        warnings.warn(f"constant series {np.flatnonzero(flat).tolist()}: correlation undefined, set to 0", RuntimeWarning)
    safe = np.where(flat, 1.0, norms)
    unit = centred / safe
    corr = unit.T @ unit
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    corr = np.clip(corr, 0.0, 1.0)
    np.fill_diagonal(corr, 0.0)
    corr[corr < threshold] = 0.0
    W[:, 0, :] = corr
    return W


class StannModel:
    """Latent states plus decoder, spatial mixing, ACTM and dynamic factors."""

    def __init__(self, cfg: ModelConfig, T: int, relation=None, seed: int = 0, actm_seed: int | None = None):
        self.cfg = cfg
        self.T = T
        n, N, R = cfg.n, cfg.N, cfg.R
        if relation is None:
            relation = np.zeros((n, R, n))
        relation = np.asarray(relation, dtype=float)
        if relation.shape != (n, R, n):
            raise ShapeError(f"relation tensor must have shape {(n, R, n)}, got {relation.shape}")
        if (relation < 0).any():
            raise DataError("relation tensor must be non-negative")
        self.relation = relation
        ss = np.random.SeedSequence(seed)
        rz, rdec, rdyn, rsp, ract = (np.random.default_rng(s) for s in ss.spawn(5))
        if actm_seed is not None:
            ract = np.random.default_rng(np.random.SeedSequence(actm_seed))
        self.Z = Tensor(rz.normal(0.0, 0.1, (T, n, N)), requires_grad=True)
        self.theta0 = Tensor(_glorot(rsp, N, N), requires_grad=True)
        self.thetaR = Tensor(_glorot(rsp, N, N, (R, N, N)), requires_grad=True)
        self.gamma = None
        if cfg.variant == "R":
            self.gamma = Tensor(np.ones((n, R, n)), requires_grad=True)
        elif cfg.variant == "D":
            self.gamma = Tensor(rsp.uniform(0.0, 1.0, (n, R, n)) / n, requires_grad=True)
        self.decoder = _make_stack(cfg, N, cfg.m, rdec)
        self.dynamic = _make_stack(cfg, N, N, rdyn)
        hidden = cfg.actm_hidden or N
        self.actm = actm_mod.ActmParams(N, hidden, rng=ract, out_bias=cfg.actm_bias)
        self.fitted = False

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = {"Z": self.Z, "theta0": self.theta0, "thetaR": self.thetaR}
        if self.gamma is not None:
            params["gamma"] = self.gamma
        params.update(self.decoder.parameters("decoder"))
        params.update(self.dynamic.parameters("dynamic"))
        params.update(self.actm.parameters())
        return params

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.parameters().items():
            v.data[...] = snap[k]

    def project(self) -> None:
        """Keep learned relation weights non-negative and cap decoder weights.

        The cap bounds the decoder's gain, so the latents cannot shrink
        towards zero while the decoder scales up to compensate.
        """
        if self.gamma is not None:
            np.maximum(self.gamma.data, 0.0, out=self.gamma.data)
        c = self.cfg.max_norm
        if c > 0:
            for name, w in self.decoder.parameters("decoder").items():
                if name.endswith(".w"):
                    norm = float(np.sqrt((w.data**2).sum()))
                    if norm > c:
                        w.data *= c / norm

    # -- factors -------------------------------------------------------------

    def relation_maps(self) -> list:
        out = []
        for r in range(self.cfg.R):
            prior = self.relation[:, r, :]
            if self.cfg.variant == "plain":
                out.append(Tensor(prior))
            else:
                g = dc.index(self.gamma, (slice(None), r, slice(None)))
                out.append(g * prior if self.cfg.variant == "R" else g)
        return out

    def mix_spatial(self, Z: Tensor) -> Tensor:
        """Intra- plus inter-dependency mixing of each step: (t, n, N) -> (t, n, N)."""
        Z = dc.as_tensor(Z)
        if Z.shape[-2:] != (self.cfg.n, self.cfg.N):
            raise ShapeError(f"expected (..., {self.cfg.n}, {self.cfg.N}) latents, got {Z.shape}")
        out = dc.matmul(Z, self.theta0)
        for r, A in enumerate(self.relation_maps()):
            if self.cfg.variant == "plain" and not self.relation[:, r, :].any():
                continue
            out = out + dc.matmul(A, dc.matmul(Z, dc.index(self.thetaR, r)))
        return out

    def _apply_dynamic(self, combined: Tensor) -> Tensor:
        lead = combined.shape[:-1]
        flat = dc.reshape(combined, (-1, self.cfg.N))
        out = dc.activation(self.cfg.h_g, self.dynamic(flat))
        return dc.reshape(out, lead + (self.cfg.N,))

    def dynamic_all(self, Z: Tensor):
        """Predicted next state for every row of ``Z`` plus the ACTM orders."""
        mixed = self.mix_spatial(Z)
        combined, orders, _ = actm_mod.attend_batch(mixed, self.actm, self.cfg.kappa, self.cfg.max_lag)
        return self._apply_dynamic(combined), orders

    def dynamic_step(self, history) -> np.ndarray:
        """Next latent state (n, N) from ``history`` (t+1, n, N), oldest first."""
        history = np.asarray(history, dtype=float)
        if history.ndim != 3 or history.shape[0] == 0:
            raise ValueError("history must be a non-empty (t, n, N) array")
        window = history[-self.cfg.max_lag :]
        with dc.no_grad():
            pred, _ = self.dynamic_all(Tensor(window))
        return pred.data[-1]

    def decode(self, Z) -> Tensor:
        """Expected variation (..., n, m) for latents (..., n, N)."""
        Z = dc.as_tensor(Z)
        if Z.shape[-1] != self.cfg.N:
            raise ShapeError(f"latent width {Z.shape[-1]} != {self.cfg.N}")
        lead = Z.shape[:-1]
        out = dc.activation(self.cfg.h_d, self.decoder(dc.reshape(Z, (-1, self.cfg.N))))
        return dc.reshape(out, lead + (self.cfg.m,))

    def orders(self) -> np.ndarray:
        _, orders = self.dynamic_all(self.Z)
        return orders

    # -- objective -----------------------------------------------------------

    def _as_obs(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        if X.shape != (self.T, self.cfg.n, self.cfg.m):
            raise ShapeError(f"observations must have shape {(self.T, self.cfg.n, self.cfg.m)}, got {X.shape}")
        return X

    def loss_terms(self, X, loss: LossConfig, rows=None) -> dict:
        """Summed reconstruction and dynamic errors over the framed samples.

        ``rows`` optionally selects a subset of the transitions ``t -> t+1``
        (boolean of length ``T-1``) for mini-batch steps.
        """
        X = self._as_obs(X)
        T, n, m = X.shape
        var = self.decode(self.Z)
        recon = dc.index(var, slice(1, None)) + X[:-1]
        diff = recon - X[1:]
        pred, _ = self.dynamic_all(dc.index(self.Z, slice(0, T - 1)))
        ddiff = dc.index(self.Z, slice(1, None)) - pred
        weight = 1.0
        if rows is not None:
            rows = np.asarray(rows, dtype=bool)
            diff = diff * np.broadcast_to(rows[:, None, None], diff.shape).astype(float)
            ddiff = ddiff * np.broadcast_to(rows[:, None, None], ddiff.shape).astype(float)
            weight = (T - 1) / max(int(rows.sum()), 1)
        if loss.delta == "mse":
            rec = dc.sq_l2(diff) * (weight / (n * m))
        else:
            rec = dc.l1(diff) * (weight / (n * m))
        dyn = dc.sq_l2(ddiff) * weight
        reg = dc.l1(self.gamma) if self.gamma is not None else None
        return {"rec": rec, "dyn": dyn, "reg": reg, "n_decoder_terms": (T - 1) * n}

    def loss(self, X, loss: LossConfig, rows=None) -> Tensor:
        t = self.loss_terms(X, loss, rows)
        total = (t["rec"] + t["dyn"] * loss.lam) * (1.0 / self.T)
        if t["reg"] is not None and loss.gamma > 0:
            total = total + t["reg"] * loss.gamma
        if not np.isfinite(total.data):
            raise NumericError("model loss is not finite")
        return total

    def energy(self, X, delta: str = "mse") -> float:
        """Unweighted total energy: summed decoder plus dynamic errors."""
        with dc.no_grad():
            t = self.loss_terms(X, LossConfig(lam=1.0, gamma=0.0, delta=delta))
        return float(t["rec"].data + t["dyn"].data)

    # -- forecasting ---------------------------------------------------------

    def forecast(self, x_last, tau: int) -> np.ndarray:
        """Roll the latent dynamics forward ``tau`` steps from the last state.

        Returns normalised observations of shape (tau, n, m).
        """
        if tau < 1:
            raise ValueError("tau must be >= 1")
        x = np.asarray(x_last, dtype=float).reshape(self.cfg.n, self.cfg.m).copy()
        history = list(self.Z.data[-self.cfg.max_lag :])
        out = np.empty((tau, self.cfg.n, self.cfg.m))
        with dc.no_grad():
            for j in range(tau):
                z_next = self.dynamic_step(np.asarray(history))
                history.append(z_next)
                if len(history) > self.cfg.max_lag:
                    history.pop(0)
                x = x + self.decode(Tensor(z_next)).data
                out[j] = x
        return out


# -- checkpoint I/O ------------------------------------------------------------

_MANIFEST_INT = ("T", "n", "N", "R", "m", "max_lag", "blocks", "layers", "width", "actm_hidden", "fitted")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_checkpoint(path, model: StannModel, extras: dict[str, np.ndarray] | None = None) -> None:
    """Text checkpoint: header, manifest lines, then named row-major blocks."""
    cfg = model.cfg
    lines = [CHECKPOINT_HEADER]
    manifest = {
        "variant": cfg.variant,
        "T": model.T,
        "n": cfg.n,
        "N": cfg.N,
        "R": cfg.R,
        "m": cfg.m,
        "max_lag": cfg.max_lag,
        "kappa": _fmt(cfg.kappa),
        "activations": f"{cfg.h_g} {cfg.h_d}",
        "stack": cfg.stack,
        "blocks": cfg.blocks,
        "layers": cfg.layers,
        "width": cfg.width,
        "actm_hidden": cfg.actm_hidden,
        "actm_bias": _fmt(cfg.actm_bias),
        "max_norm": _fmt(cfg.max_norm),
        "fitted": int(model.fitted),
    }
    lines += [f"{k} {v}" for k, v in manifest.items()]
    blocks = dict(model.parameters())
    blocks["relation"] = model.relation
    for k, v in (extras or {}).items():
        blocks[f"extra.{k}"] = np.asarray(v, dtype=float)
    lines.append(f"arrays {len(blocks)}")
    for name, arr in blocks.items():
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=float)
        shape = "x".join(str(s) for s in data.shape) if data.ndim else "1"
        lines.append(f"{name} {shape}")
        lines.extend(_fmt(v) for v in data.reshape(-1))
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[StannModel, dict[str, np.ndarray]]:
    try:
        return _read_checkpoint(path)
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed checkpoint ({exc})") from None


def _read_checkpoint(path) -> tuple[StannModel, dict[str, np.ndarray]]:
    try:
        text = Path(path).read_text().split("\n")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if not text or text[0].strip() != CHECKPOINT_HEADER:
        raise DataError(f"{path}: not a checkpoint or unsupported version (expected {CHECKPOINT_HEADER!r})")
    pos = 1
    manifest: dict[str, str] = {}
    while not text[pos].startswith("arrays "):
        key, _, value = text[pos].partition(" ")
        manifest[key] = value
        pos += 1
    count = int(text[pos].split()[1])
    pos += 1
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, shape_s = text[pos].split()
        shape = tuple(int(s) for s in shape_s.split("x"))
        size = int(np.prod(shape))
        vals = np.array([float(v) for v in text[pos + 1 : pos + 1 + size]])
        blocks[name] = vals.reshape(shape)
        pos += 1 + size
    h_g, h_d = manifest["activations"].split()
    known = {f.name for f in fields(ModelConfig)}
    cfg_kwargs = {k: int(manifest[k]) for k in _MANIFEST_INT if k in known and k in manifest}
    cfg = ModelConfig(
        variant=manifest["variant"],
        kappa=float(manifest["kappa"]),
        h_g=h_g,
        h_d=h_d,
        stack=manifest["stack"],
        actm_bias=float(manifest.get("actm_bias", "0")),
        max_norm=float(manifest.get("max_norm", "0")),
        **cfg_kwargs,
    )
    model = StannModel(cfg, int(manifest["T"]), relation=blocks["relation"], seed=0)
    for name, t in model.parameters().items():
        if name not in blocks or blocks[name].shape != t.shape:
            raise DataError(f"{path}: parameter block {name!r} missing or mis-shaped")
        t.data[...] = blocks[name]
    model.fitted = bool(int(manifest.get("fitted", "0")))
    extras = {k[len("extra.") :]: v for k, v in blocks.items() if k.startswith("extra.")}
    return model, extras


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
