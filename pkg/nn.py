"""Split regressors y = g(h(x)), Adam, and the Beta(alpha, alpha) mixing sampler.

``h`` (the embedding network, parameter group ``embed``) is either an MLP or an
LSTM over fixed-length windows; ``g`` (parameter group ``head``) is a small
MLP ending in a linear layer. The embedding ``z`` is the output of ``h`` after
its final activation, and it is the only place Manifold and UMAP Mixup mix.
"""

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import ShapeError, Tensor
from data_io import DataError, Standardizer

FORMAT_VERSION = 1
MODEL_KINDS = ("mlp", "lstm")
EMBED = "embed"
HEAD = "head"
LSTM_GATES = ("i", "f", "g", "o")
FORGET_BIAS = 1.0

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class ModelSpec:
    d_x: int
    d_y: int = 1
    kind: str = "mlp"
    hidden: Tuple[int, ...] = (100, 50)
    activation: str = "relu"
    lstm_hidden: int = 64
    head_hidden: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {sorted(ACTIVATIONS)}")
        if self.kind == "mlp" and not self.hidden:
            raise ValueError("mlp embedding needs at least one hidden layer")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "head_hidden", tuple(int(w) for w in self.head_hidden))

    @property
    def d_z(self) -> int:
        return self.hidden[-1] if self.kind == "mlp" else self.lstm_hidden


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, width: int) -> "LstmState":
        return cls(Tensor(np.zeros((batch, width))), Tensor(np.zeros((batch, width))))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SplitModel:
    def __init__(self, spec: ModelSpec, params: Dict[str, Tensor], scaler_x: Optional[Standardizer] = None,
                 scaler_y: Optional[Standardizer] = None, feature_names: Sequence[str] = ()):
        self.spec = spec
        self.params = params
        self.scaler_x = scaler_x
        self.scaler_y = scaler_y
        # raw input columns in training order; empty when trained on bare arrays
        self.feature_names: List[str] = list(feature_names)

    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "SplitModel":
        params: Dict[str, Tensor] = {}

        def linear(prefix, fan_in, fan_out):
            params[f"{prefix}.weight"] = Tensor(_uniform(rng, fan_in, (fan_in, fan_out)), requires_grad=True)
            params[f"{prefix}.bias"] = Tensor(_uniform(rng, fan_in, (fan_out,)), requires_grad=True)

        if spec.kind == "mlp":
            width = spec.d_x
            for k, out in enumerate(spec.hidden):
                linear(f"{EMBED}.{k}", width, out)
                width = out
        else:
            d_h = spec.lstm_hidden
            for gate in LSTM_GATES:
                params[f"{EMBED}.lstm.w_{gate}"] = Tensor(_uniform(rng, spec.d_x, (spec.d_x, d_h)), requires_grad=True)
                params[f"{EMBED}.lstm.u_{gate}"] = Tensor(_uniform(rng, d_h, (d_h, d_h)), requires_grad=True)
                bias = np.full(d_h, FORGET_BIAS) if gate == "f" else np.zeros(d_h)
                params[f"{EMBED}.lstm.b_{gate}"] = Tensor(bias, requires_grad=True)

        width = spec.d_z
        for k, out in enumerate(spec.head_hidden + (spec.d_y,)):
            linear(f"{HEAD}.{k}", width, out)
            width = out
        return cls(spec, params)

    # parameter groups: theta1 = embed, theta2 = head
    def group(self, name: str) -> Dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if k.split(".", 1)[0] == name}

    @property
    def theta1(self) -> Dict[str, Tensor]:
        return self.group(EMBED)

    @property
    def theta2(self) -> Dict[str, Tensor]:
        return self.group(HEAD)

    def embed(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if self.spec.kind == "mlp":
            return self._mlp_embed(x)
        return self._lstm_embed(x)

    def head(self, z: Tensor) -> Tensor:
        act = ACTIVATIONS[self.spec.activation]
        n_layers = len(self.spec.head_hidden) + 1
        out = z
        for k in range(n_layers):
            out = self._linear(f"{HEAD}.{k}", out)
            if k < n_layers - 1:
                out = act(out)
        return out

    def forward(self, x) -> Tuple[Tensor, Tensor]:
        z = self.embed(x)
        return z, self.head(z)

    def predict(self, x) -> Tensor:
        return self.forward(x)[1]

    def predict_original(self, features: np.ndarray) -> np.ndarray:
        """Predictions in target units for raw (unstandardized) features."""
        x = features if self.scaler_x is None else self.scaler_x.transform(features)
        y = self.predict(x).numpy()
        return y if self.scaler_y is None else self.scaler_y.inverse(y)

    def embed_original(self, features: np.ndarray) -> np.ndarray:
        x = features if self.scaler_x is None else self.scaler_x.transform(features)
        return self.embed(x).numpy()

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        weight = self.params[f"{prefix}.weight"]
        if x.ndim != 2 or x.shape[1] != weight.shape[0]:
            raise ShapeError(f"{prefix}: input shape {x.shape} does not match weight shape {weight.shape}")
        return x @ weight + self.params[f"{prefix}.bias"]

    def _mlp_embed(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.spec.activation]
        out = x
        for k in range(len(self.spec.hidden)):
            out = act(self._linear(f"{EMBED}.{k}", out))
        return out

    def _lstm_embed(self, x: Tensor) -> Tensor:
        # x is (batch, T * d_x): window t occupies columns [t*d_x, (t+1)*d_x)
        d_x, d_h = self.spec.d_x, self.spec.lstm_hidden
        if x.ndim != 2 or x.shape[1] == 0:
            raise ValueError(f"lstm: empty sequence batch of shape {x.shape}")
        if x.shape[1] % d_x:
            raise ShapeError(f"lstm: input width {x.shape[1]} is not a multiple of step width {d_x}")
        state = LstmState.zeros(x.shape[0], d_h)
        for t in range(x.shape[1] // d_x):
            state = self.lstm_step(ad.columns(x, t * d_x, (t + 1) * d_x), state)
        return state.h

    def lstm_step(self, x_t: Tensor, state: LstmState) -> LstmState:
        p = self.params

        def gate(name):
            return x_t @ p[f"{EMBED}.lstm.w_{name}"] + state.h @ p[f"{EMBED}.lstm.u_{name}"] + p[f"{EMBED}.lstm.b_{name}"]

        i = gate("i").sigmoid()
        f = gate("f").sigmoid()
        g = gate("g").tanh()
        o = gate("o").sigmoid()
        c = f * state.c + i * g
        return LstmState(h=o * c.tanh(), c=c)


def mlp_forward(model: SplitModel, x) -> Tuple[Tensor, Tensor]:
    if model.spec.kind != "mlp":
        raise ValueError(f"mlp_forward called on a {model.spec.kind} model")
    return model.forward(x)


def lstm_forward(model: SplitModel, sequences) -> Tuple[Tensor, Tensor]:
    """Run the recurrence from the zero state; z is the final hidden state.

    ``sequences`` is (batch, T * d_x); a single (T, d_x) window must be
    flattened to one row first.
    """
    if model.spec.kind != "lstm":
        raise ValueError(f"lstm_forward called on a {model.spec.kind} model")
    return model.forward(sequences)


# --- optimizer ---

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    """One bias-corrected Adam update; parameters are replaced in place."""
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != param.shape:
            raise ShapeError(f"adam: gradient shape {np.shape(g)} does not match parameter {name} {param.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam: non-finite gradient in parameter group {name.split('.', 1)[0]!r} ({name})")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        updated = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated.setflags(write=False)
        param.data = updated
    return params


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: Dict[Tensor, np.ndarray]) -> None:
        """Takes a tape gradient map; parameters the loss never reached get zero."""
        by_name = {name: grads.get(p, np.zeros_like(p.data)) for name, p in self.params.items()}
        adam_step(self.state, self.params, by_name)


def sample_lambda(alpha: float, rng: np.random.Generator, size=None):
    if not alpha > 0.0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    return rng.beta(alpha, alpha, size=size)


# --- persistence ---
# one JSON header line, then little-endian float64 parameters in declaration
# order, then the standardization statistics

def _buffers(model: SplitModel) -> Iterable[Tuple[str, np.ndarray]]:
    for prefix, scaler in (("scaler_x", model.scaler_x), ("scaler_y", model.scaler_y)):
        if scaler is not None:
            yield f"{prefix}.mean", np.atleast_1d(scaler.mean)
            yield f"{prefix}.std", np.atleast_1d(scaler.std)


def save_model(model: SplitModel, path) -> None:
    buffers = list(_buffers(model))
    header = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(model.spec),
        "d_x": model.spec.d_x,
        "d_z": model.spec.d_z,
        "d_y": model.spec.d_y,
        "features": model.feature_names,
        "parameters": [[name, list(p.shape)] for name, p in model.params.items()],
        "buffers": [[name, list(arr.shape)] for name, arr in buffers],
    }
    body = [p.data.ravel() for p in model.params.values()] + [arr.ravel() for _, arr in buffers]
    payload = np.concatenate(body).astype("<f8") if body else np.zeros(0, dtype="<f8")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload.tobytes())
    os.replace(tmp_path, path)


def load_model(path) -> SplitModel:
    with open(path, "rb") as fh:
        line = fh.readline()
        raw = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: not a model file (bad header)") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        version = header.get("format_version") if isinstance(header, dict) else None
        raise DataError(f"{path}: unsupported model format version {version}")

    try:
        spec = ModelSpec(**header["spec"])
        layout = header["parameters"] + header["buffers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed model header ({exc})") from None
    if len(raw) % 8:
        raise DataError(f"{path}: payload of {len(raw)} bytes is not a whole number of float64 values")
    values = np.frombuffer(raw, dtype="<f8")
    expected = sum(int(np.prod(s)) for _, s in layout)
    if values.size != expected:
        raise DataError(f"{path}: expected {expected} values, found {values.size}")

    offset = 0
    params: Dict[str, Tensor] = {}
    for name, shape in header["parameters"]:
        size = int(np.prod(shape))
        params[name] = Tensor(values[offset:offset + size].reshape(shape), requires_grad=True)
        offset += size
    buffers = {}
    for name, shape in header["buffers"]:
        size = int(np.prod(shape))
        buffers[name] = values[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size

    scalers = {}
    for prefix in ("scaler_x", "scaler_y"):
        if f"{prefix}.mean" in buffers:
            scalers[prefix] = Standardizer(mean=buffers[f"{prefix}.mean"], std=buffers[f"{prefix}.std"])
    return SplitModel(spec, params, scalers.get("scaler_x"), scalers.get("scaler_y"), header.get("features", ()))
