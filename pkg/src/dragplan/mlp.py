"""From-scratch ReLU MLP regressor for the coefficient-space tracking cost.

Input features are the stacked spline coefficients concatenated with the
segment durations, z-scored with statistics from the training split.
Labels are regressed in log1p space by default (they span orders of
magnitude); the identity transform is kept for ablation. Training is plain
minibatch SGD with momentum, and backward() also produces exact input
gradients so the planner can differentiate through the network.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_SCHEMA = "mlp-ckpt-v1"

HIDDEN_SIZES = (100, 100, 20)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 1000
    split: float = 0.8
    seed: int = 0
    label_transform: str = "log1p"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie in (0, 1)")
        if self.label_transform not in ("log1p", "identity"):
            raise ValueError("label_transform must be 'log1p' or 'identity'")


class MlpModel:
    """Feedforward ReLU network with input normalization baked in.

    weights[i] has shape (fan_in, fan_out); the final layer is linear with
    a single output. snap_weight records the smoothness/tracking balance
    computed at training time for downstream planning.
    """

    def __init__(self, weights, biases, input_mean, input_std,
                 label_transform: str = "log1p", snap_weight: float = 1.0,
                 val_mse: float = 0.0):
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self.input_mean = np.array(input_mean, dtype=float).reshape(-1)
        self.input_std = np.array(input_std, dtype=float).reshape(-1)
        self.label_transform = label_transform
        self.snap_weight = float(snap_weight)
        self.val_mse = float(val_mse)  # transformed-space validation MSE
        self._validate()

    def _validate(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        dim = self.input_mean.size
        if self.input_std.size != dim:
            raise ValueError("normalization stats must share the input dimension")
        if np.any(self.input_std <= 0):
            raise ValueError("input_std entries must be positive")
        prev = dim
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (prev, b.size):
                raise ValueError(f"layer {i} shape {w.shape} does not chain from {prev}")
            prev = b.size
        if prev != 1:
            raise ValueError("final layer must have a single output")
        for arr in (*self.weights, *self.biases, self.input_mean, self.input_std):
            if not np.isfinite(arr).all():
                raise ValueError("parameters must be finite")
        if self.label_transform not in ("log1p", "identity"):
            raise ValueError("unknown label_transform")

    @property
    def input_dim(self) -> int:
        return self.input_mean.size

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *(b.size for b in self.biases))

    @classmethod
    def init_random(cls, input_dim: int, hidden=HIDDEN_SIZES, seed: int = 0,
                    label_transform: str = "log1p") -> "MlpModel":
        rng = np.random.default_rng(seed)
        sizes = (input_dim, *hidden, 1)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, np.zeros(input_dim), np.ones(input_dim),
                   label_transform)

    def copy_parameters(self) -> tuple[list, list]:
        return ([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def transform_label(y, kind: str):
    y = np.asarray(y, dtype=float)
    return np.log1p(y) if kind == "log1p" else y


def inverse_transform_label(y, kind: str):
    y = np.asarray(y, dtype=float)
    return np.expm1(y) if kind == "log1p" else y


def _forward_cached(model: MlpModel, x: np.ndarray):
    """Transformed-space outputs plus activations for backprop."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != model dim {model.input_dim}")
    z = (x - model.input_mean) / model.input_std
    acts = [z]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = z @ w + b
        if i < last:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return z[:, 0], acts


def forward(model: MlpModel, x) -> np.ndarray | float:
    """Transformed-space prediction; scalar for a single input vector."""
    single = np.asarray(x).ndim == 1
    out, _ = _forward_cached(model, x)
    return float(out[0]) if single else out


def predict_label(model: MlpModel, x) -> np.ndarray | float:
    """Prediction mapped back to label space through the transform inverse."""
    out = forward(model, x)
    return inverse_transform_label(out, model.label_transform)


def backward(model: MlpModel, x, targets):
    """MSE loss, parameter gradients and input gradients for a batch.

    Targets are in transformed space. Input gradients are with respect to
    the raw (unnormalized) features. The ReLU subgradient at zero is zero.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if targets.size != x.shape[0]:
        raise ValueError("batch size mismatch between inputs and targets")
    out, acts = _forward_cached(model, x)
    n = x.shape[0]
    residual = out - targets
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(residual @ residual) / n
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss (residual range {residual.min()}..{residual.max()})")

    grad_w = [np.empty_like(w) for w in model.weights]
    grad_b = [np.empty_like(b) for b in model.biases]
    delta = (2.0 / n) * residual[:, None]
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0.0)
    grad_in = (delta @ model.weights[0].T) / model.input_std
    return loss, grad_w, grad_b, grad_in


def output_and_input_gradient(model: MlpModel, x) -> tuple[float, np.ndarray]:
    """Transformed-space output and its gradient w.r.t. one raw input vector."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    out, acts = _forward_cached(model, x)
    delta = np.ones((1, 1))
    last = len(model.weights) - 1
    for i in range(last, 0, -1):
        delta = (delta @ model.weights[i].T) * (acts[i] > 0.0)
    grad = (delta @ model.weights[0].T)[0] / model.input_std
    return float(out[0]), grad


def features_from_records(records) -> tuple[np.ndarray, np.ndarray]:
    """Stack (coefficients, durations) and labels from dataset records."""
    feats = np.array([np.concatenate([r.coefficients, r.durations]) for r in records])
    labels = np.array([r.label for r in records])
    return feats, labels


def _median_snap_weight(records, labels) -> float:
    """Balance scalar: median label over median smoothness cost."""
    from .spline import build_snap_cost
    snap = []
    for rec in records:
        h = build_snap_cost(_order_from_record(rec), rec.durations)
        snap.append(float(rec.coefficients @ h @ rec.coefficients))
    med_snap = float(np.median(snap))
    med_label = float(np.median(labels))
    if med_snap <= 0 or med_label <= 0:
        return 1.0
    return med_label / med_snap


def _order_from_record(rec) -> int:
    per_channel = rec.coefficients.size // (4 * rec.durations.size)
    return per_channel - 1


def train(dataset, cfg: TrainConfig = TrainConfig()):
    """Train on a dataset path or record list; returns (model, history).

    Deterministic for a fixed config: seeded split, init and epoch
    shuffles. history rows are (epoch, train_mse, val_mse) in transformed
    space; the returned model carries the best-validation parameters.
    """
    if isinstance(dataset, (str, Path)):
        from .rollout import load_dataset
        _, records = load_dataset(dataset)
    else:
        records = list(dataset)
    if len(records) < 100:
        raise ValueError(f"dataset has {len(records)} records; need at least 100")

    feats, labels = features_from_records(records)
    targets = transform_label(labels, cfg.label_transform)

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(records))
    n_train = int(round(cfg.split * len(records)))
    train_idx, val_idx = perm[:n_train], perm[n_train:]
    x_train, y_train = feats[train_idx], targets[train_idx]
    x_val, y_val = feats[val_idx], targets[val_idx]

    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std = np.where(std <= 1e-12, 1.0, std)

    # Standardize targets for conditioning; the scale is folded back into
    # the output layer afterwards so the model predicts transformed labels.
    y_mean = float(y_train.mean())
    y_std = float(y_train.std())
    if y_std <= 1e-12:
        y_std = 1.0
    y_train = (y_train - y_mean) / y_std
    y_val = (y_val - y_mean) / y_std

    model = MlpModel.init_random(feats.shape[1], seed=cfg.seed,
                                 label_transform=cfg.label_transform)
    model.input_mean = mean
    model.input_std = std
    model.snap_weight = _median_snap_weight(
        [records[i] for i in train_idx], labels[train_idx])

    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    best_val = np.inf
    best_params = model.copy_parameters()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_train)
        train_loss = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad_w, grad_b, _ = backward(model, x_train[idx], y_train[idx])
            train_loss += loss * idx.size
            for i in range(len(model.weights)):
                vel_w[i] = cfg.momentum * vel_w[i] - cfg.learning_rate * grad_w[i]
                vel_b[i] = cfg.momentum * vel_b[i] - cfg.learning_rate * grad_b[i]
                model.weights[i] += vel_w[i]
                model.biases[i] += vel_b[i]
        train_loss /= n_train
        val_pred, _ = _forward_cached(model, x_val)
        val_loss = float(np.mean((val_pred - y_val) ** 2)) if val_idx.size else train_loss
        # Record losses in the unstandardized transformed space.
        history.append((epoch, train_loss * y_std ** 2, val_loss * y_std ** 2))
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.copy_parameters()
    model.weights, model.biases = best_params
    model.weights[-1] = model.weights[-1] * y_std
    model.biases[-1] = model.biases[-1] * y_std + y_mean
    model.val_mse = float(best_val * y_std ** 2) if np.isfinite(best_val) else 0.0
    return model, history


def save_checkpoint(model: MlpModel, path: str | Path) -> None:
    """JSON checkpoint with exact float round-trip."""
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "layer_sizes": list(model.layer_sizes),
        "label_transform": model.label_transform,
        "snap_weight": model.snap_weight,
        "val_mse": model.val_mse,
        "input_mean": model.input_mean.tolist(),
        "input_std": model.input_std.tolist(),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_checkpoint(path: str | Path) -> MlpModel:
    data = json.loads(Path(path).read_text())
    if data.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {data.get('schema')!r}")
    model = MlpModel(data["weights"], data["biases"], data["input_mean"],
                     data["input_std"], data["label_transform"],
                     data["snap_weight"], data.get("val_mse", 0.0))
    if list(model.layer_sizes) != list(data["layer_sizes"]):
        raise ValueError("checkpoint layer_sizes inconsistent with parameters")
    return model


def write_history_csv(history, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for epoch, train_mse, val_mse in history:
            fh.write(f"{epoch},{train_mse!r},{val_mse!r}\n")
