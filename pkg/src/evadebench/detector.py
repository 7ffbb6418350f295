"""Substitute detector: a small feed-forward binary classifier trained from scratch.

The network flattens a ``(rows, 23)`` feature matrix after per-column
standardization, passes it through dense hidden layers and ends in one
sigmoid unit giving P(ransomware).  Training minimizes mean binary
cross-entropy with mini-batch gradient descent plus momentum; gradients come
from the hand-written backward pass in :func:`loss_and_gradients`, which
:func:`gradient_check` verifies against central finite differences.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .features import N_FEATURES, FeatureMatrix, FeatureSpec
from .npzio import save_npz

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
STD_FLOOR = 1e-8


class DetectorError(ValueError):
    pass


class SingleClassError(DetectorError):
    pass


class SpecMismatchError(DetectorError):
    pass


class TrainingDivergedError(DetectorError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at step {step}")


@dataclass(frozen=True)
class Hyperparams:
    hidden: tuple[int, ...] = (128, 64)
    activation: str = "tanh"
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    lr_decay: float = 1.0
    threshold: float = 0.5
    norm_mode: str = "per_column"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Hyperparams:
        d = {k: v for k, v in d.items() if k != "seeds"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown detector fields: {sorted(unknown)}")
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d)


@dataclass(frozen=True)
class Prediction:
    probability: float
    label: str


class Classifier(Protocol):
    """Query-only view of a detector: the only surface the attacker sees."""

    def predict(self, features: FeatureMatrix) -> Prediction: ...


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError("confusion matrix counts must be >= 0")

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn}


# -- network math -----------------------------------------------------------------


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def forward_logits(params: Sequence[np.ndarray], X: np.ndarray, activation: str) -> np.ndarray:
    a = X
    n_layers = len(params) // 2
    for k in range(n_layers):
        z = a @ params[2 * k] + params[2 * k + 1]
        a = z if k == n_layers - 1 else _act(activation, z)
    return a[:, 0]


def loss_and_gradients(
    params: Sequence[np.ndarray], X: np.ndarray, y: np.ndarray, activation: str
) -> tuple[float, list[np.ndarray]]:
    """Mean binary cross-entropy over ``X`` and its gradient w.r.t. every parameter.

    ``params`` alternates weight matrices ``(fan_in, fan_out)`` and bias vectors.
    """
    n_layers = len(params) // 2
    zs, acts = [], [X]
    a = X
    for k in range(n_layers):
        z = a @ params[2 * k] + params[2 * k + 1]
        zs.append(z)
        a = z if k == n_layers - 1 else _act(activation, z)
        acts.append(a)
    logit = zs[-1][:, 0]
    # equals log(1 + e^z) - y z, but without the cancellation that form suffers
    # when a confident correct prediction leaves a loss far below ulp(z)
    loss = float(np.mean(y * np.logaddexp(0.0, -logit) + (1.0 - y) * np.logaddexp(0.0, logit)))

    grads: list[np.ndarray] = [np.empty(0)] * len(params)
    delta = ((sigmoid(logit) - y) / X.shape[0])[:, None]
    for k in range(n_layers - 1, -1, -1):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params[2 * k].T) * _act_grad(activation, zs[k - 1], acts[k])
    return loss, grads


# -- model ---------------------------------------------------------------------------


@dataclass(eq=False)
class DetectorModel:
    architecture: dict[str, Any]
    weights: list[np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray
    seed: int
    threshold: float
    feature_spec: FeatureSpec
    history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        problems = self.violations()
        if problems:
            raise DetectorError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        sizes = self.architecture["layer_sizes"]
        if len(self.weights) != 2 * (len(sizes) - 1):
            out.append("weight list does not match architecture")
        else:
            for k in range(len(sizes) - 1):
                if self.weights[2 * k].shape != (sizes[k], sizes[k + 1]) or self.weights[2 * k + 1].shape != (
                    sizes[k + 1],
                ):
                    out.append(f"layer {k} shape mismatch")
        if not all(np.isfinite(w).all() for w in self.weights):
            out.append("non-finite weights")
        rows = self.architecture["input_shape"][0]
        if self.norm_mean.shape not in ((N_FEATURES,), (rows * N_FEATURES,)):
            out.append(f"norm_stats size {self.norm_mean.shape} is neither 23 nor rows*23")
        if not 0.0 < self.threshold < 1.0:
            out.append("threshold must lie in (0, 1)")
        return out

    @property
    def activation(self) -> str:
        return self.architecture["activation"]

    def standardize(self, values: np.ndarray) -> np.ndarray:
        """Map ``(N, rows, 23)`` raw features to standardized flat inputs ``(N, rows*23)``."""
        v = np.asarray(values, dtype=np.float64)
        n = v.shape[0]
        if self.norm_mean.shape[0] == N_FEATURES:
            return ((v - self.norm_mean) / self.norm_std).reshape(n, -1)
        return (v.reshape(n, -1) - self.norm_mean) / self.norm_std

    def _check(self, fm: FeatureMatrix) -> None:
        expected = tuple(self.architecture["input_shape"])
        if fm.values.shape != expected:
            raise DetectorError(f"feature shape {fm.values.shape} does not match model input {expected}")
        if fm.spec != self.feature_spec:
            raise SpecMismatchError(f"feature spec {fm.spec} does not match model spec {self.feature_spec}")

    def predict_proba(self, matrices: Sequence[FeatureMatrix]) -> np.ndarray:
        for fm in matrices:
            self._check(fm)
        X = self.standardize(np.stack([fm.values for fm in matrices]))
        return sigmoid(forward_logits(self.weights, X, self.activation))

    def predict(self, features: FeatureMatrix) -> Prediction:
        p = float(self.predict_proba([features])[0])
        return Prediction(p, "ransomware" if p >= self.threshold else "benign")


def predict(model: DetectorModel, features: FeatureMatrix) -> tuple[float, str]:
    """(P(ransomware), class); a tie at the threshold classifies as ransomware."""
    pred = model.predict(features)
    return pred.probability, pred.label


def _init_weights(sizes: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        params.append(rng.standard_normal((fan_in, fan_out)) * scale)
        params.append(np.zeros(fan_out))
    return params


def _dataset_arrays(dataset: Sequence[FeatureMatrix]) -> tuple[np.ndarray, np.ndarray, FeatureSpec]:
    if not dataset:
        raise DetectorError("empty dataset")
    spec = dataset[0].spec
    shape = dataset[0].values.shape
    for fm in dataset:
        if fm.spec != spec:
            raise SpecMismatchError("all training matrices must share one FeatureSpec")
        if fm.values.shape != shape:
            raise SpecMismatchError(f"inconsistent matrix shapes {shape} vs {fm.values.shape}")
    labels = {fm.label for fm in dataset}
    if labels != {"ransomware", "benign"}:
        raise SingleClassError(f"training data must contain both classes, got {sorted(labels)}")
    X = np.stack([fm.values for fm in dataset])
    y = np.array([1.0 if fm.label == "ransomware" else 0.0 for fm in dataset])
    return X, y, spec


def norm_stats(X: np.ndarray, mode: str = "per_column") -> tuple[np.ndarray, np.ndarray]:
    """Mean/std for standardization (population std, floored at 1e-8)."""
    if mode == "per_column":
        flat = X.reshape(-1, N_FEATURES)
    elif mode == "per_cell":
        flat = X.reshape(X.shape[0], -1)
    else:
        raise ValueError(f"unknown norm mode {mode!r}")
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return mean, std


def train(dataset: Sequence[FeatureMatrix], hyperparams: Hyperparams = Hyperparams(), seed: int = 0) -> DetectorModel:
    """Fit one detector; deterministic in (dataset order, hyperparams, seed)."""
    hp = hyperparams
    X, y, spec = _dataset_arrays(dataset)
    mean, std = norm_stats(X, hp.norm_mode)
    rows = X.shape[1]
    sizes = [rows * N_FEATURES, *hp.hidden, 1]
    architecture = {
        "input_shape": [rows, N_FEATURES],
        "layer_sizes": sizes,
        "activation": hp.activation,
        "output": "sigmoid",
        "norm_mode": hp.norm_mode,
    }
    rng = np.random.default_rng(seed)
    params = _init_weights(sizes, rng)
    model = DetectorModel(architecture, params, mean, std, int(seed), hp.threshold, spec)
    Xs = model.standardize(X)
    velocity = [np.zeros_like(p) for p in params]
    lr = hp.learning_rate
    step = 0
    n = Xs.shape[0]
    for _epoch in range(hp.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            batch = order[start : start + hp.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                loss, grads = loss_and_gradients(params, Xs[batch], y[batch], hp.activation)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingDivergedError(step, loss)
            for p, v, g in zip(params, velocity, grads):
                v *= hp.momentum
                v -= lr * g
                p += v
            model.history.append(loss)
            step += 1
        lr *= hp.lr_decay
    if not all(np.isfinite(p).all() for p in params):
        raise TrainingDivergedError(step, float("nan"))
    logger.debug("trained seed=%s steps=%d final loss=%.4g", seed, step, model.history[-1] if model.history else float("nan"))
    return model


def train_ensemble(
    dataset: Sequence[FeatureMatrix], hyperparams: Hyperparams = Hyperparams(), seeds: Sequence[int] = (1, 2, 3, 4, 5)
) -> list[DetectorModel]:
    """Independently trained members differing only by seed; returned in seed order."""
    if len(set(seeds)) != len(seeds):
        raise DetectorError(f"ensemble seeds must be distinct, got {list(seeds)}")
    return [train(dataset, hyperparams, s) for s in seeds]


def confusion_matrix(model: Classifier, matrices: Sequence[FeatureMatrix]) -> ConfusionMatrix:
    tp = fn = fp = tn = 0
    for fm in matrices:
        positive = model.predict(fm).label == "ransomware"
        if fm.label == "ransomware":
            tp, fn = tp + positive, fn + (not positive)
        else:
            fp, tn = fp + positive, tn + (not positive)
    return ConfusionMatrix(tp, fn, fp, tn)


def evaluate(models: Sequence[Classifier], matrices: Sequence[FeatureMatrix]) -> ConfusionMatrix:
    """Sum of the members' confusion matrices on ``matrices``."""
    total = ConfusionMatrix()
    for m in models:
        total = total + confusion_matrix(m, matrices)
    return total


def accuracy(model: DetectorModel, matrices: Sequence[FeatureMatrix]) -> float:
    cm = confusion_matrix(model, matrices)
    return (cm.tp + cm.tn) / cm.total


def fold_normalization(model: DetectorModel) -> DetectorModel:
    """Equivalent model whose first layer absorbs the standardization (identity norm stats)."""
    rows = model.architecture["input_shape"][0]
    mean = model.norm_mean if model.norm_mean.shape[0] != N_FEATURES else np.tile(model.norm_mean, rows)
    std = model.norm_std if model.norm_std.shape[0] != N_FEATURES else np.tile(model.norm_std, rows)
    W, b = model.weights[0], model.weights[1]
    W2 = W / std[:, None]
    b2 = b - (mean / std) @ W
    arch = dict(model.architecture, norm_mode="per_cell")
    return replace(
        model,
        architecture=arch,
        weights=[W2, b2, *model.weights[2:]],
        norm_mean=np.zeros(rows * N_FEATURES),
        norm_std=np.ones(rows * N_FEATURES),
        history=list(model.history),
    )


# -- gradient check ------------------------------------------------------------------

GradFn = Callable[[Sequence[np.ndarray], np.ndarray, np.ndarray, str], tuple[float, list[np.ndarray]]]


def gradient_check(
    model: DetectorModel,
    example: FeatureMatrix | np.ndarray,
    label: float | None = None,
    *,
    step: float = 1e-5,
    n_weights: int = 128,
    seed: int = 0,
    tolerance: float | None = None,
    grad_fn: GradFn = loss_and_gradients,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks a seeded random subset of at least ``max(n_weights, 100)`` scalar
    parameters (at least eight from every array).  Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``; the floor keeps exactly-zero
    gradients (e.g. from all-zero input columns) from turning float round-off
    into a spurious error of 1.  With ``tolerance`` set, exceeding it raises.
    """
    if isinstance(example, FeatureMatrix):
        y = 1.0 if example.label == "ransomware" else 0.0
        X = model.standardize(example.values[None])
    else:
        X = np.asarray(example, dtype=np.float64).reshape(1, -1)
        y = 0.0
    if label is not None:
        y = float(label)
    yv = np.array([y])
    params = [p.copy() for p in model.weights]
    _, analytic = grad_fn(params, X, yv, model.activation)

    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    total = max(n_weights, 100)
    picks: list[tuple[int, int]] = []
    for k, size in enumerate(sizes):
        for flat in rng.choice(size, size=min(8, size), replace=False):
            picks.append((k, int(flat)))
    owners = rng.choice(len(params), size=total, p=sizes / sizes.sum())
    for k in owners:
        picks.append((int(k), int(rng.integers(0, sizes[k]))))

    worst = 0.0
    for k, flat in picks:
        p = params[k].reshape(-1)
        orig = p[flat]
        p[flat] = orig + step
        up, _ = loss_and_gradients(params, X, yv, model.activation)
        p[flat] = orig - step
        down, _ = loss_and_gradients(params, X, yv, model.activation)
        p[flat] = orig
        numeric = (up - down) / (2 * step)
        a = float(analytic[k].reshape(-1)[flat])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    if tolerance is not None and worst > tolerance:
        raise DetectorError(f"gradient check failed: max relative error {worst:.3g} > {tolerance}")
    return worst


# -- persistence -----------------------------------------------------------------------


def save_model(model: DetectorModel, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (descriptor) and ``<path>.npz`` (weights)."""
    base = Path(path)
    desc = {
        "format": "evadebench-detector",
        "version": MODEL_FORMAT_VERSION,
        "architecture": model.architecture,
        "seed": model.seed,
        "threshold": model.threshold,
        "feature_spec": model.feature_spec.to_dict(),
        "n_weight_arrays": len(model.weights),
        "final_loss": model.history[-1] if model.history else None,
    }
    jpath = base.with_suffix(".json")
    npath = base.with_suffix(".npz")
    jpath.write_text(json.dumps(desc, indent=1, sort_keys=True) + "\n")
    arrays = {f"w{i}": w for i, w in enumerate(model.weights)}
    save_npz(npath, norm_mean=model.norm_mean, norm_std=model.norm_std, **arrays)
    return jpath, npath


def load_model(path: str | Path) -> DetectorModel:
    base = Path(path)
    desc = json.loads(base.with_suffix(".json").read_text())
    if desc.get("format") != "evadebench-detector" or desc.get("version") != MODEL_FORMAT_VERSION:
        raise DetectorError(f"{base}: unsupported model descriptor")
    with np.load(base.with_suffix(".npz")) as z:
        weights = [z[f"w{i}"] for i in range(desc["n_weight_arrays"])]
        mean, std = z["norm_mean"], z["norm_std"]
    return DetectorModel(
        desc["architecture"], weights, mean, std, desc["seed"], desc["threshold"], FeatureSpec.from_dict(desc["feature_spec"])
    )
