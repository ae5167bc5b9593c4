"""Tiny causal language model: embedding, one single-head attention block with
residual, a two-layer MLP with residual, and an output head.

The six dense projections are the adaptation targets; embedding and head are
never adapted.
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .adapters import AdapterConfig, AdaptedLinear, init_adapter
from .autograd import Param, Tape
from .errors import ConfigError, DataError, RankError

DENSE_LAYERS = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")
WEIGHT_ORDER = ("embed",) + DENSE_LAYERS + ("head",)
MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelSpec:
    vocab: int = 32
    embed: int = 32
    context: int = 8
    hidden: int = 64
    nonlinearity: str = "gelu"
    precision: int = 32

    def __post_init__(self):
        for field in ("vocab", "embed", "context", "hidden"):
            if getattr(self, field) < 1:
                raise ConfigError(f"model {field} must be positive")
        if self.nonlinearity not in ("relu", "gelu"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def shapes(self):
        e, h, v = self.embed, self.hidden, self.vocab
        return {
            "embed": (v, e),
            "attn.q": (e, e), "attn.k": (e, e), "attn.v": (e, e), "attn.o": (e, e),
            "mlp.up": (h, e), "mlp.down": (e, h),
            "head": (v, e),
        }

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class TinyLM:
    def __init__(self, spec, weights, trainable=True):
        self.spec = spec
        shapes = spec.shapes()
        missing = [n for n in WEIGHT_ORDER if n not in weights]
        if missing:
            raise ConfigError(f"missing weights: {missing}")
        self.embed = Param(np.array(weights["embed"], dtype=spec.dtype), "embed", trainable)
        self.head = Param(np.array(weights["head"], dtype=spec.dtype), "head", trainable)
        self.layers = {}
        for name in DENSE_LAYERS:
            w = weights[name]
            if isinstance(w, AdaptedLinear):
                self.layers[name] = w
            else:
                self.layers[name] = Param(np.array(w, dtype=spec.dtype), name, trainable)
        for name in WEIGHT_ORDER:
            got = self.layers[name].shape if name in self.layers else getattr(
                self, name).shape
            if tuple(got) != shapes[name]:
                raise ConfigError(f"{name}: shape {got} does not match spec {shapes[name]}")

    @classmethod
    def init(cls, spec, seed=0):
        rng = np.random.default_rng(seed)
        weights = {}
        for name, (out, inp) in spec.shapes().items():
            if name == "embed":
                weights[name] = rng.standard_normal((out, inp))
            else:
                bound = 1.0 / np.sqrt(inp)
                weights[name] = rng.uniform(-bound, bound, size=(out, inp))
        return cls(spec, weights)

    @classmethod
    def from_weights(cls, weights, nonlinearity="gelu", context=8):
        """Rebuild from a name -> array mapping; dims and precision are read off the arrays."""
        try:
            v, e = weights["embed"].shape
            h = weights["mlp.up"].shape[0]
            dtype = weights["embed"].dtype
        except KeyError as exc:
            raise ConfigError(f"missing weight {exc}") from None
        precision = 32 if dtype == np.float32 else 64
        spec = ModelSpec(vocab=v, embed=e, context=context, hidden=h,
                         nonlinearity=nonlinearity, precision=precision)
        return cls(spec, weights)

    @property
    def adapted(self):
        return any(isinstance(l, AdaptedLinear) for l in self.layers.values())

    def base_weights(self):
        """Pre-trained tensors in checkpoint order (adapters excluded)."""
        out = {"embed": self.embed.value}
        for name in DENSE_LAYERS:
            layer = self.layers[name]
            out[name] = layer.pretrained if isinstance(layer, AdaptedLinear) else layer.value
        out["head"] = self.head.value
        return out

    def frozen_tensors(self):
        """Every array that must stay bitwise fixed during adaptation."""
        out = {"embed": self.embed.value, "head": self.head.value}
        for name, layer in self.layers.items():
            if isinstance(layer, AdaptedLinear):
                out[f"{name}.W"] = layer.base.value
                out[f"{name}.pretrained"] = layer.pretrained
            else:
                out[name] = layer.value
        return out

    def params(self):
        out = [self.embed]
        for layer in self.layers.values():
            out.extend(layer.params() if isinstance(layer, AdaptedLinear) else [layer])
        out.append(self.head)
        return out

    def trainable(self):
        return [p for p in self.params() if p.trainable]

    def astype(self, precision):
        """Copy of an un-adapted model at another precision."""
        spec = ModelSpec(**{**asdict(self.spec), "precision": precision})
        return TinyLM(spec, self.base_weights())

    def merged(self):
        """Adapter-free copy with every adapter folded into its dense weight."""
        from .adapters import merge
        weights = {"embed": self.embed.value, "head": self.head.value}
        for name, layer in self.layers.items():
            weights[name] = merge(layer) if isinstance(layer, AdaptedLinear) else layer.value
        return TinyLM(self.spec, weights, trainable=False)

    # forward

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DataError(f"tokens must be batch x length, got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.spec.vocab):
            raise DataError(f"token ids must lie in [0, {self.spec.vocab})")
        if tokens.shape[1] > self.spec.context:
            raise DataError(f"sequence length {tokens.shape[1]} exceeds context {self.spec.context}")
        return tokens.astype(np.int64)

    def _dense(self, tape, name, x, train_mode, rng):
        layer = self.layers[name]
        if isinstance(layer, AdaptedLinear):
            return layer.apply(tape, x, train_mode, rng)
        return tape.matmul(x, tape.param(layer), transpose_b=True, name=name)

    def forward(self, tape, tokens, train_mode=False, rng=None):
        """Record the model on ``tape`` and return the (batch, length, vocab) logits node."""
        tokens = self._check_tokens(tokens)
        if train_mode and rng is None:
            raise ValueError("train_mode needs an rng for dropout")
        n = tokens.shape[1]
        dtype = self.spec.dtype
        x = tape.gather(tape.param(self.embed), tokens, name="embed")

        q = self._dense(tape, "attn.q", x, train_mode, rng)
        k = self._dense(tape, "attn.k", x, train_mode, rng)
        v = self._dense(tape, "attn.v", x, train_mode, rng)
        scores = tape.scale(tape.matmul(q, k, transpose_b=True, name="attn.scores"),
                            dtype(1.0 / np.sqrt(self.spec.embed)))
        mask = np.triu(np.full((n, n), MASK_VALUE, dtype=dtype), k=1)
        probs = tape.softmax(tape.broadcast_add(scores, tape.const(mask, "causal_mask")))
        att = tape.matmul(probs, v, name="attn.mix")
        x1 = tape.add(x, self._dense(tape, "attn.o", att, train_mode, rng), name="resid.attn")

        u = tape.act(self._dense(tape, "mlp.up", x1, train_mode, rng), self.spec.nonlinearity)
        x2 = tape.add(x1, self._dense(tape, "mlp.down", u, train_mode, rng), name="resid.mlp")
        return tape.matmul(x2, tape.param(self.head), transpose_b=True, name="head")

    def loss(self, tokens, train_mode=False, rng=None, tape=None):
        """Mean next-token cross-entropy; returns ``(tape, loss_node)``."""
        tape = Tape() if tape is None else tape
        tokens = self._check_tokens(tokens)
        logits = self.forward(tape, tokens, train_mode, rng)
        targets, weights = _next_token_targets(tokens, self.spec.dtype)
        return tape, tape.cross_entropy(logits, targets, weights, name="loss")

    def logits(self, tokens):
        return self.forward(Tape(), tokens).value

    def eval_loss(self, tokens):
        return float(self.loss(tokens)[1].value)

    def sequence_losses(self, tokens):
        """Per-sequence mean next-token loss in eval mode."""
        tokens = self._check_tokens(tokens)
        logits = self.logits(tokens).astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp[:, :-1], tokens[:, 1:, None], axis=-1)[..., 0]
        return -picked.mean(axis=1)


def _next_token_targets(tokens, dtype):
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    weights = np.ones(tokens.shape, dtype=dtype)
    weights[:, -1] = 0.0
    return targets, weights


def attach_adapters(model, cfg):
    """Wrap every dense projection of ``model`` per ``cfg``.

    Returns ``(adapted_model, registry)``; the adapted model shares nothing
    mutable with ``model`` and every non-adapter tensor in it is frozen.
    """
    if not isinstance(cfg, AdapterConfig):
        raise ConfigError("attach_adapters needs an AdapterConfig")
    shapes = model.spec.shapes()
    limit = min(min(shapes[n]) for n in DENSE_LAYERS)
    if cfg.rank > limit:
        raise RankError(f"rank {cfg.rank} exceeds the smallest targeted dimension {limit}")
    streams = np.random.SeedSequence(cfg.seed).spawn(len(DENSE_LAYERS))
    weights = {"embed": model.embed.value, "head": model.head.value}
    base = model.base_weights()
    for name, seq in zip(DENSE_LAYERS, streams):
        weights[name] = init_adapter(base[name], cfg, rng=np.random.default_rng(seq), name=name)
    adapted = TinyLM(model.spec, weights, trainable=False)
    adapted.embed.value.flags.writeable = False
    adapted.head.value.flags.writeable = False
    registry = adapted.trainable()
    return adapted, registry


def trainable_count(registry):
    return int(sum(p.value.size for p in registry))
