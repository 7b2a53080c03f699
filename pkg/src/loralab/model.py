"""Desk-scale transformer encoder with frozen, seeded base weights.

The encoder is post-layer-norm with learned absolute position embeddings,
scaled dot-product attention (no dropout, no attention biases) and a GELU
feed-forward block. Classification/regression logits come from mean pooling
over positions followed by one linear map.

Attention projections are the adaptation targets: ``forward`` optionally
takes a ``{(module, layer): delta}`` mapping and adds each delta to the
corresponding frozen projection before the pass. With no deltas (or all-zero
deltas) the output equals the frozen-base output bit for bit.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import _rng, autodiff as ad, matcore

ATTENTION_MODULES = ("query", "key", "value", "output")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 64
    max_len: int = 32
    n_outputs: int = 8
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )


def tensor_layout(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Canonical tensor names and shapes; vectors are stored as 1 x n."""
    d, f = config.d_model, config.d_ff
    layout: dict[str, tuple[int, int]] = {
        "embed.token": (config.vocab_size, d),
        "embed.pos": (config.max_len, d),
        "head.out": (d, config.n_outputs),
    }
    for l in range(1, config.n_layers + 1):
        for m in ATTENTION_MODULES:
            layout[f"layer{l}.{m}"] = (d, d)
        layout[f"layer{l}.ffn.w1"] = (d, f)
        layout[f"layer{l}.ffn.b1"] = (1, f)
        layout[f"layer{l}.ffn.w2"] = (f, d)
        layout[f"layer{l}.ffn.b2"] = (1, d)
        for ln in ("ln1", "ln2"):
            layout[f"layer{l}.{ln}.gain"] = (1, d)
            layout[f"layer{l}.{ln}.bias"] = (1, d)
    return layout


class BaseWeights:
    """Frozen tensor set for one ModelConfig; arrays are read-only."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        layout = tensor_layout(config)
        missing = sorted(set(layout) - set(tensors))
        extra = sorted(set(tensors) - set(layout))
        if missing or extra:
            raise ValueError(f"weight set mismatch: missing={missing} extra={extra}")
        store: dict[str, np.ndarray] = {}
        for name, shape in layout.items():
            a = np.array(tensors[name], dtype=np.float64)
            if a.shape != shape:
                raise matcore.ShapeError(f"{name}: expected {shape}, got {a.shape}")
            a.flags.writeable = False
            store[name] = a
        self.config = config
        self._tensors = store

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def projection(self, module: str, layer: int) -> np.ndarray:
        if module not in ATTENTION_MODULES:
            raise KeyError(f"unknown attention module {module!r}")
        return self._tensors[f"layer{layer}.{module}"]

    def replace(self, updates: dict[str, np.ndarray]) -> "BaseWeights":
        """New weight set with the named tensors substituted."""
        tensors = dict(self._tensors)
        for name, value in updates.items():
            if name not in tensors:
                raise KeyError(f"unknown tensor {name!r}")
            tensors[name] = value
        return BaseWeights(self.config, tensors)


def build_model(config: ModelConfig) -> BaseWeights:
    """Deterministic weights: Gaussian std 1/sqrt(d_model), zero biases, unit gains."""
    std = 1.0 / math.sqrt(config.d_model)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_layout(config).items():
        if name.endswith((".bias", ".b1", ".b2")):
            tensors[name] = np.zeros(shape)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = matcore.gaussian(
                shape[0], shape[1], 0.0, std, _rng.derive_seed(config.seed, "init." + name)
            )
    return BaseWeights(config, tensors)


def validate_tokens(config: ModelConfig, tokens) -> np.ndarray:
    a = np.asarray(tokens)
    if a.ndim != 2:
        raise ValueError(f"tokens must be a batch x length array, got {a.ndim}-D")
    if not np.issubdtype(a.dtype, np.integer):
        raise ValueError(f"token ids must be integers, got dtype {a.dtype}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"empty token batch {a.shape}")
    if a.shape[1] > config.max_len:
        raise ValueError(f"sequence length {a.shape[1]} exceeds max_len {config.max_len}")
    if (a < 0).any() or (a >= config.vocab_size).any():
        bad = int(a[(a < 0) | (a >= config.vocab_size)][0])
        raise ValueError(f"token id {bad} out of range [0, {config.vocab_size})")
    return a.astype(np.int64)


def _gelu(x: ad.Tensor) -> ad.Tensor:
    # tanh form; smooth everywhere, which keeps finite-difference checks clean
    cubic = ad.scale(ad.mul(ad.mul(x, x), x), 0.044715)
    inner = ad.scale(ad.add(x, cubic), _GELU_C)
    return ad.mul(ad.scale(x, 0.5), ad.add(ad.tanh(inner), ad.const(1.0)))


def _layer_norm(x: ad.Tensor, gain: np.ndarray, bias: np.ndarray) -> ad.Tensor:
    mu = ad.reduce_mean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.reduce_mean(ad.mul(centered, centered), axis=-1, keepdims=True)
    inv = ad.power(ad.add(var, ad.const(LN_EPS)), -0.5)
    return ad.add(ad.mul(ad.mul(centered, inv), ad.const(gain)), ad.const(bias))


def _attention(config: ModelConfig, proj: dict[str, ad.Tensor], x: ad.Tensor) -> ad.Tensor:
    batch, length, d = x.shape
    dh = d // config.n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (batch, length, config.n_heads, dh)), (0, 2, 1, 3))

    q = heads(ad.matmul(x, proj["query"]))
    k = heads(ad.matmul(x, proj["key"]))
    v = heads(ad.matmul(x, proj["value"]))
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, length, d))
    return ad.matmul(ctx, proj["output"])


def encode(
    weights: BaseWeights,
    tokens,
    projections: dict[tuple[str, int], ad.Tensor] | None = None,
) -> tuple[ad.Tensor, list[ad.Tensor]]:
    """Build the forward graph; ``projections`` overrides attention weights.

    Returns the logits node and the per-layer hidden-state nodes. Callers that
    only want values can take ``.value``; the trainer passes adapted
    projection tensors and runs ``backward`` on a loss derived from logits.
    """
    config = weights.config
    tokens = validate_tokens(config, tokens)
    length = tokens.shape[1]
    x = ad.const(weights["embed.token"][tokens] + weights["embed.pos"][:length])
    hidden: list[ad.Tensor] = []
    for l in range(1, config.n_layers + 1):
        proj: dict[str, ad.Tensor] = {}
        for m in ATTENTION_MODULES:
            override = projections.get((m, l)) if projections else None
            proj[m] = override if override is not None else ad.const(weights.projection(m, l))
        x = _layer_norm(
            ad.add(x, _attention(config, proj, x)),
            weights[f"layer{l}.ln1.gain"],
            weights[f"layer{l}.ln1.bias"],
        )
        h = _gelu(ad.add(ad.matmul(x, ad.const(weights[f"layer{l}.ffn.w1"])), ad.const(weights[f"layer{l}.ffn.b1"])))
        ffn = ad.add(ad.matmul(h, ad.const(weights[f"layer{l}.ffn.w2"])), ad.const(weights[f"layer{l}.ffn.b2"]))
        x = _layer_norm(
            ad.add(x, ffn),
            weights[f"layer{l}.ln2.gain"],
            weights[f"layer{l}.ln2.bias"],
        )
        hidden.append(x)
    pooled = ad.reduce_mean(x, axis=1)
    logits = ad.matmul(pooled, ad.const(weights["head.out"]))
    return logits, hidden


def forward(
    weights: BaseWeights,
    deltas: dict[tuple[str, int], np.ndarray] | None,
    tokens,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the encoder; ``deltas`` maps (module, layer) to additive updates."""
    projections = None
    if deltas:
        projections = {}
        for (module, layer), dw in deltas.items():
            w0 = weights.projection(module, layer)
            dw = matcore.as_matrix(dw, f"delta for ({module}, {layer})")
            if dw.shape != w0.shape:
                raise matcore.ShapeError(
                    f"delta for ({module}, {layer}) has shape {dw.shape}, expected {w0.shape}"
                )
            projections[(module, layer)] = ad.const(w0 + dw)
    logits, hidden = encode(weights, tokens, projections)
    return logits.value, [h.value for h in hidden]


# --- checkpoint io ----------------------------------------------------------

def _config_line(config: ModelConfig) -> str:
    parts = " ".join(f"{f.name}={getattr(config, f.name)}" for f in fields(config))
    return f"CONFIG {parts}"


def _parse_config_line(line: str) -> ModelConfig:
    parts = line.split()
    if not parts or parts[0] != "CONFIG":
        raise ValueError(f"expected CONFIG line, got {line.rstrip()!r}")
    kwargs = {}
    for item in parts[1:]:
        key, _, value = item.partition("=")
        kwargs[key] = int(value)
    return ModelConfig(**kwargs)


def save_model(path, weights: BaseWeights) -> None:
    with open(path, "w") as fh:
        fh.write(_config_line(weights.config) + "\n")
        for name in weights.names():
            matcore.write_matrix(fh, name, weights[name])


def load_model(path) -> BaseWeights:
    text = Path(path).read_text()
    fh = io.StringIO(text)
    config = _parse_config_line(fh.readline())
    tensors = dict(matcore.iter_matrices(fh))
    return BaseWeights(config, tensors)
