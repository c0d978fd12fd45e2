"""Attention-based multiple-instance learning heads with exact gradients.

Two heads share the embedding layer ``h_k = relu(W_emb x_k + b_emb)``:

* AMIL: ungated attention pooling ``a = softmax(w^T tanh(V h_k))``,
  ``z = sum_k a_k h_k`` and a logistic bag classifier.
* CLAM (two-branch variant): one attention branch and one bag classifier per
  class, class scores combined by softmax, plus a per-class instance
  classifier trained on the most and least attended instances of the
  true-class branch.

Everything runs in float64 numpy; backward passes are written out by hand
and checked against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DimError, FormatError, NumericalError
from .imageio import atomic_write

__all__ = [
    "AMILModel",
    "CLAMModel",
    "TrainConfig",
    "AMILOutput",
    "CLAMOutput",
    "attention_weights",
    "attention_logits",
    "forward_amil",
    "forward_clam",
    "predict_proba",
    "loss_and_gradients",
    "Adam",
    "train",
    "TrainResult",
    "save_checkpoint",
    "load_checkpoint",
    "init_model",
]

D_EMB = 128
ATTN_DIM = 64


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(eq=False)
class AMILModel:
    params: dict[str, np.ndarray]
    trained_epochs: int = 0

    kind = "amil"

    @classmethod
    def init(cls, feature_dim: int, d_emb: int = D_EMB, attn_dim: int = ATTN_DIM, seed: int = 0, zero_classifier: bool = False):
        rng = np.random.default_rng(seed)
        p = {
            "W_emb": _uniform(rng, (d_emb, feature_dim), feature_dim),
            "b_emb": _uniform(rng, (d_emb,), feature_dim),
            "V": _uniform(rng, (attn_dim, d_emb), d_emb),
            "w": _uniform(rng, (attn_dim,), attn_dim),
            "W_cls": _uniform(rng, (d_emb,), d_emb),
            "b_cls": _uniform(rng, (1,), d_emb),
        }
        if zero_classifier:
            p["W_cls"][:] = 0.0
            p["b_cls"][:] = 0.0
        return cls(p)

    @property
    def feature_dim(self) -> int:
        return self.params["W_emb"].shape[1]

    def hyper(self) -> dict:
        return {}

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.params.items()}, self.trained_epochs, **self.hyper())


@dataclass(eq=False)
class CLAMModel:
    params: dict[str, np.ndarray]
    trained_epochs: int = 0
    c_bag: float = 0.7
    c_inst: float = 0.3
    k_max: int = 8

    kind = "clam"
    n_classes = 2

    def __post_init__(self):
        if abs(self.c_bag + self.c_inst - 1.0) > 1e-12:
            raise ValueError(f"c_bag + c_inst must be 1, got {self.c_bag} + {self.c_inst}")

    @classmethod
    def init(cls, feature_dim: int, d_emb: int = D_EMB, attn_dim: int = ATTN_DIM, seed: int = 0, zero_classifier: bool = False, **hyper):
        rng = np.random.default_rng(seed)
        p = {
            "W_emb": _uniform(rng, (d_emb, feature_dim), feature_dim),
            "b_emb": _uniform(rng, (d_emb,), feature_dim),
        }
        for c in range(cls.n_classes):
            p[f"V{c}"] = _uniform(rng, (attn_dim, d_emb), d_emb)
            p[f"w{c}"] = _uniform(rng, (attn_dim,), attn_dim)
        for c in range(cls.n_classes):
            p[f"W_cls{c}"] = _uniform(rng, (d_emb,), d_emb)
            p[f"b_cls{c}"] = _uniform(rng, (1,), d_emb)
        for c in range(cls.n_classes):
            p[f"W_inst{c}"] = _uniform(rng, (2, d_emb), d_emb)
            p[f"b_inst{c}"] = _uniform(rng, (2,), d_emb)
        if zero_classifier:
            for c in range(cls.n_classes):
                p[f"W_cls{c}"][:] = 0.0
                p[f"b_cls{c}"][:] = 0.0
        return cls(p, **hyper)

    @property
    def feature_dim(self) -> int:
        return self.params["W_emb"].shape[1]

    def hyper(self) -> dict:
        return {"c_bag": self.c_bag, "c_inst": self.c_inst, "k_max": self.k_max}

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.params.items()}, self.trained_epochs, **self.hyper())


def init_model(kind: str, feature_dim: int, **kwargs):
    kind = kind.lower()
    if kind == "amil":
        return AMILModel.init(feature_dim, **kwargs)
    if kind == "clam":
        return CLAMModel.init(feature_dim, **kwargs)
    raise ValueError(f"unknown model kind {kind!r}")


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------


def _check_bag(model, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DimError(f"bag must be a non-empty (K, M) matrix, got shape {X.shape}")
    if X.shape[1] != model.feature_dim:
        raise DimError(f"bag feature dim {X.shape[1]} != model feature dim {model.feature_dim}")
    return X


def _softmax(e: np.ndarray) -> np.ndarray:
    ex = np.exp(e - e.max())
    return ex / ex.sum()


def _sigmoid(s: float) -> float:
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    ex = math.exp(s)
    return ex / (1.0 + ex)


def _embed(p, X):
    pre = X @ p["W_emb"].T + p["b_emb"]
    return pre, np.maximum(pre, 0.0)


def _attend(V, w, H):
    T = np.tanh(H @ V.T)
    return T, _softmax(T @ w)


def _attend_backward(V, w, H, T, a, da):
    """Gradients of the attention branch given dLoss/da."""
    de = a * (da - a @ da)
    dw = T.T @ de
    dpre = np.outer(de, w) * (1.0 - T * T)
    return dpre.T @ H, dw, dpre @ V


def _embed_backward(X, pre, dH):
    dpre = dH * (pre > 0.0)
    return dpre.T @ X, dpre.sum(axis=0)


# ----------------------------------------------------------------------------
# forward passes
# ----------------------------------------------------------------------------


class AMILOutput(NamedTuple):
    probability: float
    attention: np.ndarray
    logit: float
    z: np.ndarray


class CLAMOutput(NamedTuple):
    scores: np.ndarray  # (2,)
    probabilities: np.ndarray  # (2,)
    attention: np.ndarray  # (2, K)
    instance_logits: np.ndarray  # (2, K, 2)

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probabilities))


def forward_amil(model: AMILModel, X) -> AMILOutput:
    X = _check_bag(model, X)
    p = model.params
    _, H = _embed(p, X)
    _, a = _attend(p["V"], p["w"], H)
    z = a @ H
    s = float(p["W_cls"] @ z + p["b_cls"][0])
    return AMILOutput(_sigmoid(s), a, s, z)


def forward_clam(model: CLAMModel, X) -> CLAMOutput:
    X = _check_bag(model, X)
    p = model.params
    _, H = _embed(p, X)
    att, scores, inst = [], [], []
    for c in range(model.n_classes):
        _, a = _attend(p[f"V{c}"], p[f"w{c}"], H)
        att.append(a)
        scores.append(float(p[f"W_cls{c}"] @ (a @ H) + p[f"b_cls{c}"][0]))
        inst.append(H @ p[f"W_inst{c}"].T + p[f"b_inst{c}"])
    scores = np.array(scores)
    return CLAMOutput(scores, _softmax(scores), np.stack(att), np.stack(inst))


def predict_proba(model, X) -> float:
    """Probability of the positive class for one bag."""
    if model.kind == "amil":
        return forward_amil(model, X).probability
    return float(forward_clam(model, X).probabilities[1])


def attention_weights(model, X, branch: int | None = None) -> np.ndarray:
    """Attention over the instances of a bag.

    For CLAM, ``branch`` selects the class branch; ``None`` uses the branch of
    the predicted class.
    """
    if model.kind == "amil":
        return forward_amil(model, X).attention
    out = forward_clam(model, X)
    return out.attention[out.predicted if branch is None else branch]


def attention_logits(model, X, branch: int = 0) -> np.ndarray:
    """Pre-softmax attention scores ``w^T tanh(V h_k)`` of one branch."""
    X = _check_bag(model, X)
    p = model.params
    _, H = _embed(p, X)
    if model.kind == "amil":
        V, w = p["V"], p["w"]
    else:
        V, w = p[f"V{branch}"], p[f"w{branch}"]
    return np.tanh(H @ V.T) @ w


# ----------------------------------------------------------------------------
# losses and gradients
# ----------------------------------------------------------------------------


def instance_k(n_instances: int, k_max: int = 8) -> int:
    return min(k_max, math.ceil(n_instances / 2))


def _amil_loss_grad(model: AMILModel, X, y: int):
    p = model.params
    pre, H = _embed(p, X)
    T, a = _attend(p["V"], p["w"], H)
    z = a @ H
    s = float(p["W_cls"] @ z + p["b_cls"][0])
    loss = float(np.logaddexp(0.0, -s) if y == 1 else np.logaddexp(0.0, s))
    ds = _sigmoid(s) - y

    g = {"W_cls": ds * z, "b_cls": np.array([ds])}
    dz = ds * p["W_cls"]
    dH = np.outer(a, dz)
    dV, dw, dH_att = _attend_backward(p["V"], p["w"], H, T, a, H @ dz)
    g["V"], g["w"] = dV, dw
    g["W_emb"], g["b_emb"] = _embed_backward(X, pre, dH + dH_att)
    return loss, g


def _clam_loss_grad(model: CLAMModel, X, y: int):
    p = model.params
    pre, H = _embed(p, X)
    K = H.shape[0]
    g = {}
    dH = np.zeros_like(H)

    cache, scores = [], np.empty(model.n_classes)
    for c in range(model.n_classes):
        T, a = _attend(p[f"V{c}"], p[f"w{c}"], H)
        z = a @ H
        scores[c] = p[f"W_cls{c}"] @ z + p[f"b_cls{c}"][0]
        cache.append((T, a, z))

    # bag-level cross-entropy over the two class scores
    lse = float(np.logaddexp.reduce(scores))
    bag_loss = lse - scores[y]
    dscores = np.exp(scores - lse)
    dscores[y] -= 1.0
    dscores *= model.c_bag
    for c, (T, a, z) in enumerate(cache):
        ds = dscores[c]
        g[f"W_cls{c}"] = ds * z
        g[f"b_cls{c}"] = np.array([ds])
        dz = ds * p[f"W_cls{c}"]
        dH += np.outer(a, dz)
        dV, dw, dH_att = _attend_backward(p[f"V{c}"], p[f"w{c}"], H, T, a, H @ dz)
        g[f"V{c}"], g[f"w{c}"] = dV, dw
        dH += dH_att

    # instance loss on the true-class branch; the top/bottom-k selection is
    # treated as a constant
    a_true = cache[y][1]
    k = instance_k(K, model.k_max)
    order = np.argsort(-a_true, kind="stable")
    idx = np.concatenate([order[:k], order[::-1][:k]])
    targets = np.concatenate([np.ones(k, dtype=np.intp), np.zeros(k, dtype=np.intp)])
    Hs = H[idx]
    logits = Hs @ p[f"W_inst{y}"].T + p[f"b_inst{y}"]
    lse_i = np.logaddexp(logits[:, 0], logits[:, 1])
    inst_loss = float(np.mean(lse_i - logits[np.arange(2 * k), targets]))
    dlogits = np.exp(logits - lse_i[:, None])
    dlogits[np.arange(2 * k), targets] -= 1.0
    dlogits *= model.c_inst / (2 * k)
    for c in range(model.n_classes):
        g[f"W_inst{c}"] = np.zeros_like(p[f"W_inst{c}"])
        g[f"b_inst{c}"] = np.zeros_like(p[f"b_inst{c}"])
    g[f"W_inst{y}"] = dlogits.T @ Hs
    g[f"b_inst{y}"] = dlogits.sum(axis=0)
    np.add.at(dH, idx, dlogits @ p[f"W_inst{y}"])

    g["W_emb"], g["b_emb"] = _embed_backward(X, pre, dH)
    loss = model.c_bag * bag_loss + model.c_inst * inst_loss
    return float(loss), g


def loss_and_gradients(model, X, label: int) -> tuple[float, dict[str, np.ndarray]]:
    """Training loss of one bag and its gradient with respect to every parameter.

    AMIL uses binary cross-entropy. CLAM mixes the bag cross-entropy and the
    instance cross-entropy as ``c_bag * bag + c_inst * inst``.

    Raises:
        NumericalError: the loss is not finite.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    X = _check_bag(model, X)
    if model.kind == "amil":
        loss, g = _amil_loss_grad(model, X, int(label))
    else:
        loss, g = _clam_loss_grad(model, X, int(label))
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    return loss, g


# ----------------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.99
    beta2: float = 0.999
    weight_decay: float = 1e-4
    epochs: int = 20
    seed: int = 0
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"betas must lie in [0, 1), got {b}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "seed": self.seed,
            "eps": self.eps,
        }


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.cfg = config
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for name, param in params.items():
            grad = grads[name]
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad * grad
            param *= 1.0 - cfg.lr * cfg.weight_decay
            param -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


@dataclass
class TrainResult:
    model: object
    losses: list[float] = field(default_factory=list)

    def loss_csv(self) -> str:
        lines = ["epoch,mean_loss"] + [f"{i + 1},{loss!r}" for i, loss in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


def train(
    model,
    bags: Sequence,
    config: TrainConfig,
    features: Callable[[object, int], np.ndarray] | None = None,
) -> TrainResult:
    """Train ``model`` in place, one optimizer step per bag.

    ``bags`` need ``.features`` and ``.label``. Bag order is reshuffled every
    epoch from ``config.seed``. ``features(bag, epoch)``, if given, replaces
    the stored features (used for train-time augmentation).

    Raises:
        NumericalError: loss or parameters stop being finite; the message
            carries the loss trace so far.
    """
    if not bags:
        raise ValueError("empty training set")
    dims = {np.asarray(b.features).shape[1] for b in bags}
    if dims != {model.feature_dim}:
        raise DimError(f"bag feature dims {sorted(dims)} do not match model dim {model.feature_dim}")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config)
    result = TrainResult(model)
    for epoch in range(config.epochs):
        epoch_losses = []
        for i in rng.permutation(len(bags)):
            bag = bags[i]
            X = bag.features if features is None else features(bag, epoch)
            try:
                loss, grads = loss_and_gradients(model, X, bag.label)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch + 1}: {exc}; loss trace {result.losses}") from None
            opt.step(model.params, grads)
            epoch_losses.append(loss)
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise NumericalError(f"epoch {epoch + 1}: parameters diverged; loss trace {result.losses}")
        result.losses.append(math.fsum(epoch_losses) / len(epoch_losses))
        model.trained_epochs += 1
    return result


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

CKPT_MAGIC = b"QPCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def checkpoint_bytes(model, meta: dict | None = None) -> bytes:
    names = list(model.params)
    header = {
        "kind": model.kind,
        "trained_epochs": model.trained_epochs,
        "hyper": model.hyper(),
        "params": [[n, list(model.params[n].shape)] for n in names],
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.asarray(model.params[n], dtype="<f8").tobytes() for n in names)
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(hb)) + hb + body


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    atomic_write(path, checkpoint_bytes(model, meta))


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise FormatError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    off = _CKPT_HEAD.size
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = data[off : off + 8 * n]
        if len(chunk) != 8 * n:
            raise FormatError(f"{path}: truncated parameter {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes")
    cls = AMILModel if header["kind"] == "amil" else CLAMModel
    model = cls(params, header["trained_epochs"], **header["hyper"])
    return model, header["meta"]
