"""MLP parameter containers for the four networks and their forward passes.

G  feature extractor    input_dim -> feature_dim
F  classifier           feature_dim -> n_classes (single linear head by default)
D  domain discriminator feature_dim -> 1 logit (three affine layers)
H  selector             input_dim -> 2 logits (select, discard), own trunk

Parameters live as numpy arrays between steps.  ``attach`` binds them to a
fresh tape for one optimisation step; ``frozen`` gives a constant view for
evaluation and pseudo-labelling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

NETWORKS = ("G", "F", "D", "H")


@dataclass(frozen=True)
class LayerSpec:
    widths: tuple[int, ...]  # input, hidden..., output

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("LayerSpec needs at least an input and an output width")
        if any(int(w) < 1 for w in self.widths):
            raise ValueError(f"layer widths must be >= 1, got {self.widths}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class MlpParams:
    """Weights are (out x in), biases (out,). Entries are arrays or Tensors."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and paired")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if np.shape(w)[0] != np.shape(b)[0]:
                raise ValueError(f"layer {i}: weight rows {np.shape(w)[0]} != bias size {np.shape(b)[0]}")
            if i and np.shape(w)[1] != np.shape(self.weights[i - 1])[0]:
                raise ValueError(f"layer {i}: fan-in does not chain with previous layer")

    @property
    def in_dim(self) -> int:
        return int(np.shape(self.weights[0])[1])

    @property
    def out_dim(self) -> int:
        return int(np.shape(self.weights[-1])[0])

    @property
    def n_params(self) -> int:
        return int(sum(np.size(_raw(w)) + np.size(_raw(b)) for w, b in zip(self.weights, self.biases)))

    def arrays(self) -> list[np.ndarray]:
        """Flat [W0, b0, W1, b1, ...] as plain arrays."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [_raw(w), _raw(b)]
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def attach(self, tape: Tape) -> "MlpParams":
        return MlpParams([tape.watch(w) for w in self.arrays()[0::2]],
                         [tape.watch(b) for b in self.arrays()[1::2]])

    def frozen(self) -> "MlpParams":
        return MlpParams([Tensor(_raw(w)) for w in self.weights], [Tensor(_raw(b)) for b in self.biases])

    def copy(self) -> "MlpParams":
        return MlpParams.from_arrays([a.copy() for a in self.arrays()])


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def init_params(spec: LayerSpec, rng: np.random.Generator) -> MlpParams:
    """Kaiming-uniform weights, bound sqrt(6 / fan_in); zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x) -> Tensor:
    """Affine layers with relu between them; the last layer is linear."""
    h = ad.as_tensor(x)
    if h.data.ndim != 2 or h.shape[1] != params.in_dim:
        raise ad.ShapeError(f"mlp input width {h.shape[-1] if h.data.ndim else None} != fan-in {params.in_dim}")
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add(ad.matmul(h, ad.transpose(ad.as_tensor(w))), ad.as_tensor(b))
        if i < n - 1:
            h = ad.relu(h)
    return h


@dataclass(frozen=True)
class GrlLambda:
    value: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"GRL lambda must lie in [0, 1], got {self.value}")


def grl(x: Tensor, lam: GrlLambda | float) -> Tensor:
    value = lam.value if isinstance(lam, GrlLambda) else GrlLambda(float(lam)).value
    return ad.grl(x, value)


@dataclass
class ModelConfig:
    g_hidden: tuple[int, ...] = (128, 128)
    feature_dim: int = 32
    f_hidden: tuple[int, ...] = ()
    d_hidden: tuple[int, ...] = (64, 64)
    h_hidden: tuple[int, ...] = (64, 64)
    selector_zero_head: bool = True  # selector starts undecided (p_select = 0.5 everywhere)


@dataclass
class ModelBundle:
    G: MlpParams
    F: MlpParams
    D: MlpParams
    H: MlpParams
    config: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.G.out_dim != self.F.in_dim or self.G.out_dim != self.D.in_dim:
            raise ValueError("F and D must consume G's features")
        if self.D.out_dim != 1 or self.H.out_dim != 2:
            raise ValueError("D emits one logit and H two")
        if self.H.in_dim != self.G.in_dim:
            raise ValueError("H must consume raw inputs")

    @property
    def n_classes(self) -> int:
        return self.F.out_dim

    def nets(self) -> dict[str, MlpParams]:
        return {"G": self.G, "F": self.F, "D": self.D, "H": self.H}

    def attach(self, tape: Tape) -> "ModelBundle":
        return ModelBundle(self.G.attach(tape), self.F.attach(tape), self.D.attach(tape),
                           self.H.attach(tape), self.config)

    def frozen(self) -> "ModelBundle":
        return ModelBundle(self.G.frozen(), self.F.frozen(), self.D.frozen(), self.H.frozen(), self.config)

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.G.copy(), self.F.copy(), self.D.copy(), self.H.copy(), self.config)

    def n_params(self) -> dict[str, int]:
        return {k: v.n_params for k, v in self.nets().items()}

    # convenience forwards
    def features(self, x) -> Tensor:
        return mlp_forward(self.G, x)

    def logits(self, x) -> Tensor:
        return mlp_forward(self.F, mlp_forward(self.G, x))

    def predict_proba(self, x) -> np.ndarray:
        """Classifier softmax on a constant view (no tape)."""
        frozen = self.frozen()
        return ad.softmax(frozen.logits(np.asarray(x, dtype=np.float64))).data


def build_models(input_dim: int, n_classes: int, rng: np.random.Generator,
                 config: ModelConfig | None = None) -> ModelBundle:
    cfg = config or ModelConfig()
    if not cfg.g_hidden:
        raise ValueError("G needs at least one hidden layer")
    G = init_params(LayerSpec((input_dim, *cfg.g_hidden, cfg.feature_dim)), rng)
    F = init_params(LayerSpec((cfg.feature_dim, *cfg.f_hidden, n_classes)), rng)
    D = init_params(LayerSpec((cfg.feature_dim, *cfg.d_hidden, 1)), rng)
    H = init_params(LayerSpec((input_dim, *cfg.h_hidden, 2)), rng)
    if cfg.selector_zero_head:
        H.weights[-1][:] = 0.0
    return ModelBundle(G, F, D, H, cfg)


class DomainStandardizer:
    """Per-domain input standardisation fitted on the training split.

    Stand-in for domain-specific normalisation layers; off by default.
    """

    def __init__(self, source: np.ndarray, target: np.ndarray, eps: float = 1e-8):
        self.stats = {
            "source": (source.mean(axis=0), source.std(axis=0) + eps),
            "target": (target.mean(axis=0), target.std(axis=0) + eps),
        }

    def __call__(self, x: np.ndarray, domain: str) -> np.ndarray:
        mu, sd = self.stats[domain]
        return (x - mu) / sd
