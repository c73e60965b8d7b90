"""Universal emulator: 6 parameters -> 10 curve codes.

Three dense layers with batch normalization and leaky rectifiers after the
first two, trained with Adam on mean squared error in the code space.
Implemented directly in numpy so inference, training, and the exact
input-space gradients needed by calibration share one deterministic code
path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import TRAIN, EnsembleDataset
from .pca import PcaBasis, project, reconstruct

MODE_TRAIN = "TRAIN"
MODE_EVAL = "EVAL"

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

INPUT_DIM = 6
OUTPUT_DIM = 10


@dataclass
class TrainConfig:
    hidden1: int = 64
    hidden2: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1750
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    validation_fraction: float = 0.1
    leaky_slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden1, self.hidden2, self.batch_size, self.epochs) < 1:
            raise ValueError("hidden widths, batch size, and epochs must be positive")
        if self.learning_rate <= 0 or self.leaky_slope <= 0:
            raise ValueError("learning rate and leaky slope must be positive")
        if not (0.0 < self.validation_fraction <= 0.5):
            raise ValueError("validation_fraction must be in (0, 0.5]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "hidden1", "hidden2", "learning_rate", "batch_size", "epochs",
            "adam_beta1", "adam_beta2", "adam_eps", "validation_fraction",
            "leaky_slope", "seed")}


@dataclass
class SurrogateModel:
    weights: dict[str, np.ndarray]
    leaky_slope: float
    mode: str = MODE_EVAL
    meta: dict = field(default_factory=dict)

    # Parameter tensors, in serialization order.
    KEYS = ("W1", "b1", "bn1_scale", "bn1_shift", "bn1_mean", "bn1_var",
            "W2", "b2", "bn2_scale", "bn2_shift", "bn2_mean", "bn2_var",
            "W3", "b3")

    def __post_init__(self):
        missing = [k for k in self.KEYS if k not in self.weights]
        if missing:
            raise ValueError(f"model missing tensors: {', '.join(missing)}")
        if np.any(self.weights["bn1_var"] <= 0) or np.any(self.weights["bn2_var"] <= 0):
            raise ValueError("batch-norm running variances must be positive")

    def eval_affines(self):
        """Frozen batch-norm folded into per-feature (scale, shift) pairs."""
        w = self.weights
        s1 = w["bn1_scale"] / np.sqrt(w["bn1_var"] + BN_EPS)
        t1 = w["bn1_shift"] - s1 * w["bn1_mean"]
        s2 = w["bn2_scale"] / np.sqrt(w["bn2_var"] + BN_EPS)
        t2 = w["bn2_shift"] - s2 * w["bn2_mean"]
        return (s1, t1), (s2, t2)


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def _leaky_grad(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, 1.0, slope)


def _init_weights(h1: int, h2: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    def dense(n_in, n_out):
        scale = np.sqrt(2.0 / n_in)
        return rng.standard_normal((n_in, n_out)) * scale

    return {
        "W1": dense(INPUT_DIM, h1), "b1": np.zeros(h1),
        "bn1_scale": np.ones(h1), "bn1_shift": np.zeros(h1),
        "bn1_mean": np.zeros(h1), "bn1_var": np.ones(h1),
        "W2": dense(h1, h2), "b2": np.zeros(h2),
        "bn2_scale": np.ones(h2), "bn2_shift": np.zeros(h2),
        "bn2_mean": np.zeros(h2), "bn2_var": np.ones(h2),
        "W3": dense(h2, OUTPUT_DIM), "b3": np.zeros(OUTPUT_DIM),
    }


def forward(model: SurrogateModel, x: np.ndarray) -> np.ndarray:
    """Eval-mode forward pass; accepts a 6-vector or an n x 6 batch."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite surrogate input")
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    w = model.weights
    (s1, t1), (s2, t2) = model.eval_affines()
    p1 = (xb @ w["W1"] + w["b1"]) * s1 + t1
    h1 = _leaky(p1, model.leaky_slope)
    p2 = (h1 @ w["W2"] + w["b2"]) * s2 + t2
    h2 = _leaky(p2, model.leaky_slope)
    out = h2 @ w["W3"] + w["b3"]
    return out[0] if single else out


def predict_curve(model: SurrogateModel, basis: PcaBasis, x: np.ndarray) -> np.ndarray:
    """Normalized cumulative curve(s) for parameter vector(s) x."""
    return reconstruct(basis, forward(model, x))


def backprop_curve_grad(model: SurrogateModel, basis: PcaBasis, x: np.ndarray,
                        d_curves: np.ndarray) -> np.ndarray:
    """Pull an n x T curve-space gradient back to the n x 6 input space.

    Exact reverse-mode pass through the frozen batch-norm affine maps and
    the leaky rectifiers; the model must be in EVAL mode.
    """
    if model.mode != MODE_EVAL:
        raise RuntimeError("input gradients require an EVAL-mode model")
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d_curves = np.atleast_2d(np.asarray(d_curves, dtype=np.float64))
    w = model.weights
    (s1, t1), (s2, t2) = model.eval_affines()
    p1 = (xb @ w["W1"] + w["b1"]) * s1 + t1
    h1 = _leaky(p1, model.leaky_slope)
    p2 = (h1 @ w["W2"] + w["b2"]) * s2 + t2
    h2 = _leaky(p2, model.leaky_slope)

    dz = d_curves @ basis.components.T
    dh2 = dz @ w["W3"].T
    dp2 = dh2 * _leaky_grad(p2, model.leaky_slope)
    dh1 = (dp2 * s2) @ w["W2"].T
    dp1 = dh1 * _leaky_grad(p1, model.leaky_slope)
    return (dp1 * s1) @ w["W1"].T


def input_gradient(model: SurrogateModel, basis: PcaBasis, x: np.ndarray,
                   day_weights: np.ndarray, y_obs: np.ndarray) -> np.ndarray:
    """Gradient of 0.5 * ||w . (predict_curve(x) - y_obs)||^2 w.r.t. x."""
    day_weights = np.asarray(day_weights, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    curve = predict_curve(model, basis, x)
    d_curve = day_weights ** 2 * (curve - y_obs)
    return backprop_curve_grad(model, basis, x, d_curve)[0]


def _train_forward(w: dict, x: np.ndarray, slope: float):
    """Training-mode forward with batch statistics; returns output + caches."""
    cache = {}
    a1 = x @ w["W1"] + w["b1"]
    mu1 = a1.mean(axis=0)
    var1 = a1.var(axis=0)
    xhat1 = (a1 - mu1) / np.sqrt(var1 + BN_EPS)
    p1 = w["bn1_scale"] * xhat1 + w["bn1_shift"]
    h1 = _leaky(p1, slope)
    a2 = h1 @ w["W2"] + w["b2"]
    mu2 = a2.mean(axis=0)
    var2 = a2.var(axis=0)
    xhat2 = (a2 - mu2) / np.sqrt(var2 + BN_EPS)
    p2 = w["bn2_scale"] * xhat2 + w["bn2_shift"]
    h2 = _leaky(p2, slope)
    out = h2 @ w["W3"] + w["b3"]
    cache.update(x=x, xhat1=xhat1, var1=var1, mu1=mu1, p1=p1, h1=h1,
                 xhat2=xhat2, var2=var2, mu2=mu2, p2=p2, h2=h2)
    return out, cache


def _bn_backward(dp, xhat, var, scale):
    n = dp.shape[0]
    dscale = np.sum(dp * xhat, axis=0)
    dshift = np.sum(dp, axis=0)
    dxhat = dp * scale
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    da = (inv_std / n) * (n * dxhat - np.sum(dxhat, axis=0)
                          - xhat * np.sum(dxhat * xhat, axis=0))
    return da, dscale, dshift


def _train_backward(w: dict, cache: dict, d_out: np.ndarray, slope: float) -> dict:
    grads = {}
    grads["W3"] = cache["h2"].T @ d_out
    grads["b3"] = d_out.sum(axis=0)
    dh2 = d_out @ w["W3"].T
    dp2 = dh2 * _leaky_grad(cache["p2"], slope)
    da2, grads["bn2_scale"], grads["bn2_shift"] = _bn_backward(
        dp2, cache["xhat2"], cache["var2"], w["bn2_scale"])
    grads["W2"] = cache["h1"].T @ da2
    grads["b2"] = da2.sum(axis=0)
    dh1 = da2 @ w["W2"].T
    dp1 = dh1 * _leaky_grad(cache["p1"], slope)
    da1, grads["bn1_scale"], grads["bn1_shift"] = _bn_backward(
        dp1, cache["xhat1"], cache["var1"], w["bn1_scale"])
    grads["W1"] = cache["x"].T @ da1
    grads["b1"] = da1.sum(axis=0)
    return grads


TRAINABLE = ("W1", "b1", "bn1_scale", "bn1_shift",
             "W2", "b2", "bn2_scale", "bn2_shift", "W3", "b3")


def train(dataset: EnsembleDataset, basis: PcaBasis, cfg: TrainConfig,
          max_runs_per_msa: int | None = None) -> SurrogateModel:
    """Fit the emulator on the dataset's TRAIN split.

    Deterministic given cfg.seed: weight init, the validation split, and the
    per-epoch shuffle order all come from one seeded generator.
    """
    mask = dataset.record_mask(split=TRAIN, max_runs=max_runs_per_msa)
    inputs = dataset.params[mask]
    targets = project(basis, dataset.normalized[mask])
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("dataset has no TRAIN records")

    rng = np.random.default_rng(cfg.seed)
    w = _init_weights(cfg.hidden1, cfg.hidden2, rng)

    order = rng.permutation(n)
    n_val = max(1, int(round(n * cfg.validation_fraction))) if n > 1 else 0
    val_idx, fit_idx = order[:n_val], order[n_val:]
    if fit_idx.size == 0:
        fit_idx, val_idx = order, order[:0]
    x_fit, z_fit = inputs[fit_idx], targets[fit_idx]
    x_val, z_val = inputs[val_idx], targets[val_idx]

    m_state = {k: np.zeros_like(w[k]) for k in TRAINABLE}
    v_state = {k: np.zeros_like(w[k]) for k in TRAINABLE}
    t_step = 0
    train_losses, val_losses = [], []

    n_fit = x_fit.shape[0]
    batch = min(cfg.batch_size, n_fit)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n_fit)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n_fit, batch):
            idx = perm[start:start + batch]
            xb, zb = x_fit[idx], z_fit[idx]
            out, cache = _train_forward(w, xb, cfg.leaky_slope)
            resid = out - zb
            loss = float(np.mean(resid ** 2))
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}, "
                                   f"batch {n_batches}")
            d_out = 2.0 * resid / resid.size
            grads = _train_backward(w, cache, d_out, cfg.leaky_slope)

            # Running statistics use the unbiased batch variance.
            nb = idx.size
            for layer, mu, var in (("bn1", cache["mu1"], cache["var1"]),
                                   ("bn2", cache["mu2"], cache["var2"])):
                unbiased = var * nb / max(nb - 1, 1)
                w[f"{layer}_mean"] = (BN_MOMENTUM * w[f"{layer}_mean"]
                                      + (1 - BN_MOMENTUM) * mu)
                w[f"{layer}_var"] = (BN_MOMENTUM * w[f"{layer}_var"]
                                     + (1 - BN_MOMENTUM) * unbiased)

            t_step += 1
            for key in TRAINABLE:
                m_state[key] = cfg.adam_beta1 * m_state[key] + (1 - cfg.adam_beta1) * grads[key]
                v_state[key] = cfg.adam_beta2 * v_state[key] + (1 - cfg.adam_beta2) * grads[key] ** 2
                m_hat = m_state[key] / (1 - cfg.adam_beta1 ** t_step)
                v_hat = v_state[key] / (1 - cfg.adam_beta2 ** t_step)
                w[key] = w[key] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

            epoch_loss += loss
            n_batches += 1
        train_losses.append(epoch_loss / max(n_batches, 1))

        model_view = SurrogateModel(weights=w, leaky_slope=cfg.leaky_slope,
                                    mode=MODE_EVAL, meta={})
        if x_val.shape[0]:
            val_losses.append(float(np.mean((forward(model_view, x_val) - z_val) ** 2)))

    meta = {
        "config": cfg.to_dict(),
        "n_train_records": int(n_fit),
        "n_val_records": int(x_val.shape[0]),
        "final_train_loss": train_losses[-1] if train_losses else None,
        "final_val_loss": val_losses[-1] if val_losses else None,
        "train_losses": train_losses,
        "val_losses": val_losses,
    }
    return SurrogateModel(weights={k: w[k].copy() for k in SurrogateModel.KEYS},
                          leaky_slope=cfg.leaky_slope, mode=MODE_EVAL, meta=meta)


def _checksum(weights: dict) -> str:
    digest = hashlib.sha256()
    for key in SurrogateModel.KEYS:
        digest.update(np.ascontiguousarray(weights[key], dtype=np.float64).tobytes())
    return digest.hexdigest()


def save(model: SurrogateModel, path) -> None:
    payload = {
        "dims": {k: list(model.weights[k].shape) for k in SurrogateModel.KEYS},
        "leaky_slope": model.leaky_slope,
        "mode": model.mode,
        "meta": model.meta,
        "checksum": _checksum(model.weights),
        "tensors": {k: np.asarray(model.weights[k], dtype=np.float64).ravel().tolist()
                    for k in SurrogateModel.KEYS},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load(path) -> SurrogateModel:
    payload = json.loads(Path(path).read_text())
    weights = {}
    for key in SurrogateModel.KEYS:
        shape = tuple(payload["dims"][key])
        weights[key] = np.array(payload["tensors"][key], dtype=np.float64).reshape(shape)
    if _checksum(weights) != payload["checksum"]:
        raise ValueError(f"{path}: checksum mismatch (corrupt model file)")
    return SurrogateModel(weights=weights, leaky_slope=float(payload["leaky_slope"]),
                          mode=payload["mode"], meta=payload.get("meta", {}))
