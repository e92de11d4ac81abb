"""Surrogate model builders, training loop and evaluation.

Three families predict normalized power-flow targets from normalized
features: a plain MLP, a small CNN over the zero-padded feature image, and
an RBF network whose centers come from K-means over the training features.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .scenarios import Dataset

EVAL_CHUNK = 2048


class ShapeError(nn.ShapeMismatch):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch: int = 256
    epochs: int = 100
    beta1: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class SurrogateModel:
    family: str
    net: nn.Network
    x_slots: list[str] = field(default_factory=list)
    y_slots: list[str] = field(default_factory=list)
    x_norm: object = None
    y_norm: object = None
    metadata: dict = field(default_factory=dict)

    def predict_normalized(self, xn: np.ndarray) -> np.ndarray:
        xn = np.asarray(xn, float)
        out = [self.net.predict(xn[i:i + EVAL_CHUNK])
               for i in range(0, len(xn), EVAL_CHUNK)]
        return np.concatenate(out) if out else np.zeros((0, len(self.y_slots)))

    def predict(self, x_raw: np.ndarray) -> np.ndarray:
        if self.x_norm is None or self.y_norm is None:
            raise ValueError("model has no bound normalization parameters")
        return self.y_norm.invert(self.predict_normalized(self.x_norm.apply(x_raw)))

    def bind(self, ds: Dataset):
        self.x_slots = list(ds.x_slots)
        self.y_slots = list(ds.y_slots)
        self.x_norm = ds.x_norm
        self.y_norm = ds.y_norm


# ---------------------------------------------------------------------------
# builders

def _zero_final_dense(net: nn.Network):
    last = net.layers[-1]
    last.w = np.zeros_like(last.w)
    last.b = np.zeros_like(last.b)


def build_mlp(input_len: int, output_len: int, hidden=(512, 256, 128, 64),
              dropout: float = 0.0, seed: int = 0) -> SurrogateModel:
    """Dense + ReLU stack with a linear output layer."""
    if input_len < 1 or output_len < 1:
        raise ValueError("input/output lengths must be positive")
    rng = np.random.default_rng([seed, 11])
    layers = []
    prev = input_len
    for k, h in enumerate(hidden):
        layers.append(nn.Dense(prev, h, rng))
        layers.append(nn.ReLU())
        if dropout:
            layers.append(nn.Dropout(dropout, seed=seed * 1000 + k))
        prev = h
    layers.append(nn.Dense(prev, output_len, rng))
    net = nn.Network(layers)
    _zero_final_dense(net)
    return SurrogateModel(family="mlp", net=net)


def default_cnn_reshape(input_len: int) -> tuple[int, int]:
    """Smallest odd-sided square holding the feature vector; an odd side
    keeps the post-convolution map divisible by the 2x2 pool."""
    side = max(3, math.isqrt(max(input_len - 1, 0)) + 1)
    if side % 2 == 0:
        side += 1
    return side, side


def build_cnn(input_len: int, output_len: int, reshape=None,
              convs=((32, 2, 2), (64, 2, 2)), fcs=(512, 256, 128, 64),
              dropout: float = 0.0, seed: int = 0) -> SurrogateModel:
    """Reshape -> conv/pool/ReLU stack -> dense stack -> linear output.

    Each convolution is valid (no padding); a 2x2 max pool follows a
    convolution whenever the map divides evenly and stays at least 2 wide.
    Raises ShapeError naming the first incompatible layer otherwise.
    """
    h, w = reshape if reshape is not None else default_cnn_reshape(input_len)
    if h * w < input_len:
        raise ShapeError(f"reshape {h}x{w} cannot hold {input_len} features")
    rng = np.random.default_rng([seed, 13])
    layers = [nn.PadReshape(input_len, h, w)]
    maps = 1
    for i, (f, k1, k2) in enumerate(convs):
        if k1 > h or k2 > w:
            raise ShapeError(f"conv layer {i + 1}: kernel {k1}x{k2} exceeds map {h}x{w}")
        layers.append(nn.Conv2D(maps, f, k1, k2, rng))
        layers.append(nn.ReLU())
        h, w = h - k1 + 1, w - k2 + 1
        maps = f
        if i == 0:
            # first stage always pools, mirroring the reference stack
            if h % 2 or w % 2:
                raise ShapeError(f"pool layer {i + 1}: map {h}x{w} not divisible by 2x2")
            layers.append(nn.Pool2D(2, 2, "max"))
            h, w = h // 2, w // 2
        elif h % 2 == 0 and w % 2 == 0 and h >= 4 and w >= 4:
            layers.append(nn.Pool2D(2, 2, "max"))
            h, w = h // 2, w // 2
    layers.append(nn.Flatten())
    prev = maps * h * w
    if prev < 1:
        raise ShapeError("convolution stack consumed the whole map")
    for k, hsize in enumerate(fcs):
        layers.append(nn.Dense(prev, hsize, rng))
        layers.append(nn.ReLU())
        if dropout:
            layers.append(nn.Dropout(dropout, seed=seed * 1000 + 500 + k))
        prev = hsize
    layers.append(nn.Dense(prev, output_len, rng))
    net = nn.Network(layers)
    _zero_final_dense(net)
    return SurrogateModel(family="cnn", net=net)


# Gaussian width = intra-cluster rms distance times this factor.  In
# high-dimensional feature space the raw cluster spread leaves the kernels
# nearly disjoint and the network badly underfits; widening them until they
# overlap turns the hidden layer into a smooth global basis.
RBF_SIGMA_WIDTH = 3.0


def build_rbfnet(train_x: np.ndarray, k: int, output_len: int,
                 seed: int = 0, train_y: np.ndarray = None) -> SurrogateModel:
    """RBF layer with K-means centers over the training features, frozen,
    followed by a trainable linear output layer.

    With ``train_y`` given, the output layer starts from the classical
    closed-form RBF solution (regularized least squares on the Gaussian
    activations); gradient training then fine-tunes it.  Otherwise it
    starts at zero.
    """
    train_x = np.asarray(train_x, float)
    if k > train_x.shape[0]:
        raise ValueError("k exceeds the number of training samples")
    centers, sigmas = nn.kmeans(train_x, k, tol=1e-6, seed=seed)
    rbf = nn.RBFLayer(centers, sigmas * RBF_SIGMA_WIDTH)
    out = nn.Dense(k, output_len)
    out.w = np.zeros_like(out.w)
    out.b = np.zeros_like(out.b)
    if train_y is not None:
        train_y = np.asarray(train_y, float)
        phi = rbf.forward(train_x)
        a = np.concatenate([phi, np.ones((len(phi), 1))], axis=1)
        gram = a.T @ a
        gram[np.diag_indices_from(gram)] += 1e-8
        coef = np.linalg.solve(gram, a.T @ train_y)
        out.w = coef[:-1].T.copy()
        out.b = coef[-1].copy()
    net = nn.Network([rbf, out])
    return SurrogateModel(family="rbfnet", net=net)


# ---------------------------------------------------------------------------
# training

def train(model: SurrogateModel, ds: Dataset, cfg: TrainConfig) -> list[float]:
    """Mini-batch Adam on the MSE of normalized targets over the train split.

    Returns the per-epoch mean training loss.
    """
    if ds.x_norm is None:
        raise ValueError("dataset must be finalized (normalizer fitted) before training")
    xt, yt = ds.normalized(ds.train_idx)
    if yt.shape[1] != model.net.layers[-1].n_out:
        raise nn.ShapeMismatch("model output width does not match dataset targets")
    rng = np.random.default_rng([cfg.seed, 29])
    opt = nn.Adam(model.net.params(), lr=cfg.lr, beta1=cfg.beta1)
    history = []
    n = len(xt)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch):
            idx = perm[start:start + cfg.batch]
            try:
                loss, grads = model.net.train_step_gradients(xt[idx], yt[idx])
            except nn.NonFiniteGradient as exc:
                raise nn.NonFiniteGradient(
                    f"epoch {epoch + 1}, batch {start // cfg.batch + 1}: {exc}") from None
            opt.step(grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    model.bind(ds)
    model.metadata.update({"seed": cfg.seed, "epochs": cfg.epochs, "lr": cfg.lr,
                           "batch": cfg.batch, "final_train_mse": history[-1]})
    return history


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    mse_pct: float
    mae_pct: float
    groups: dict  # group -> {"mse_pct", "mae_pct", "slots"}
    worst_abs: dict  # group -> worst denormalized absolute error
    split: str
    n: int

    def table(self) -> str:
        lines = [f"{'group':8} {'slots':>6} {'MSE %':>10} {'MAE %':>10}"]
        for g, row in self.groups.items():
            lines.append(f"{g:8} {row['slots']:>6} {row['mse_pct']:>10.4f} {row['mae_pct']:>10.4f}")
        lines.append(f"{'overall':8} {sum(r['slots'] for r in self.groups.values()):>6} "
                     f"{self.mse_pct:>10.4f} {self.mae_pct:>10.4f}")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "slots", "mse_pct", "mae_pct", "worst_abs_denorm"])
            for g, row in self.groups.items():
                w.writerow([g, row["slots"], row["mse_pct"], row["mae_pct"],
                            self.worst_abs.get(g, "")])
            w.writerow(["overall", sum(r["slots"] for r in self.groups.values()),
                        self.mse_pct, self.mae_pct, ""])


def _slot_group(name: str) -> str:
    return name.split("|", 1)[0]


def evaluate(model: SurrogateModel, ds: Dataset, split: str = "test") -> EvalReport:
    """MSE/MAE percentages over normalized targets with per-group breakdown
    and worst denormalized absolute errors."""
    idx = {"test": ds.test_idx, "train": ds.train_idx}[split]
    xn, yn = ds.normalized(idx)
    pred = model.predict_normalized(xn)
    err = pred - yn
    mse_pct = float(np.mean(err ** 2)) * 100.0
    mae_pct = float(np.mean(np.abs(err))) * 100.0

    abs_denorm = np.abs(ds.y_norm.invert(pred) - ds.y[idx])
    groups: dict = {}
    worst: dict = {}
    for j, name in enumerate(ds.y_slots):
        g = _slot_group(name)
        row = groups.setdefault(g, {"se": 0.0, "ae": 0.0, "slots": 0})
        row["se"] += float(np.sum(err[:, j] ** 2))
        row["ae"] += float(np.sum(np.abs(err[:, j])))
        row["slots"] += 1
        worst[g] = max(worst.get(g, 0.0), float(abs_denorm[:, j].max()))
    n = len(idx)
    out_groups = {}
    for g, row in groups.items():
        cells = n * row["slots"]
        out_groups[g] = {"mse_pct": row["se"] / cells * 100.0,
                         "mae_pct": row["ae"] / cells * 100.0,
                         "slots": row["slots"]}
    return EvalReport(mse_pct=mse_pct, mae_pct=mae_pct, groups=out_groups,
                      worst_abs=worst, split=split, n=n)


def mean_baseline_mse(ds: Dataset, split: str = "train") -> float:
    """MSE of always predicting the train-split mean (normalized targets)."""
    _, yt = ds.normalized(ds.train_idx)
    mean = yt.mean(axis=0)
    idx = {"test": ds.test_idx, "train": ds.train_idx}[split]
    _, yn = ds.normalized(idx)
    return float(np.mean((yn - mean) ** 2))


# ---------------------------------------------------------------------------
# model file round trip

def model_to_dict(model: SurrogateModel) -> dict:
    return {
        "family": model.family,
        "layers": [layer.spec() for layer in model.net.layers],
        "weights": [layer.weight_dict() for layer in model.net.layers],
        "x_slots": model.x_slots,
        "y_slots": model.y_slots,
        "x_norm": None if model.x_norm is None else
        {"mins": model.x_norm.mins.tolist(), "maxs": model.x_norm.maxs.tolist()},
        "y_norm": None if model.y_norm is None else
        {"mins": model.y_norm.mins.tolist(), "maxs": model.y_norm.maxs.tolist()},
        "metadata": model.metadata,
    }


def model_from_dict(doc: dict) -> SurrogateModel:
    from .scenarios import Normalizer

    layers = []
    for spec, weights in zip(doc["layers"], doc["weights"]):
        layer = nn.layer_from_spec(spec)
        layer.load_weights(weights)
        layers.append(layer)
    model = SurrogateModel(family=doc["family"], net=nn.Network(layers),
                           x_slots=doc.get("x_slots", []),
                           y_slots=doc.get("y_slots", []),
                           metadata=doc.get("metadata", {}))
    for attr, key in (("x_norm", "x_norm"), ("y_norm", "y_norm")):
        val = doc.get(key)
        if val is not None:
            setattr(model, attr, Normalizer(np.array(val["mins"], float),
                                            np.array(val["maxs"], float)))
    return model
