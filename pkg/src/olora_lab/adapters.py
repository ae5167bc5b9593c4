"""LoRA and OLoRA adapters around a frozen dense weight.

Weights follow the (out, in) convention: ``W`` is d x k, ``B`` is d x r,
``A`` is r x k and the layer computes ``h = W x + s B A x``.

OLoRA takes ``B, A`` from the rank-r thin QR of the pre-trained weight and
stores ``W - s B A`` as the frozen base, so the layer starts out computing
exactly the pre-trained map. The same ``s`` scales the adapter branch in the
forward pass.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Param
from .errors import ConfigError, NumericError, RankError, ShapeError, SizeError
from .linalg import SVD_MAX_DIM, frobenius_norm, svd_values, thin_qr

METHODS = ("lora", "olora")
DROPOUT_TARGETS = ("update", "input")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float = 16.0
    scale: Optional[float] = None
    dropout: float = 0.05
    method: str = "olora"
    seed: int = 0
    dropout_target: str = "update"

    def __post_init__(self):
        if self.dropout_target not in DROPOUT_TARGETS:
            raise ConfigError(f"dropout_target must be one of {DROPOUT_TARGETS}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown adapter method {self.method!r}; expected one of {METHODS}")
        if int(self.rank) != self.rank or self.rank < 1:
            raise RankError(f"rank must be a positive integer, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    @property
    def s(self):
        """Effective adapter multiplier; alpha / r unless set explicitly."""
        return self.alpha / self.rank if self.scale is None else self.scale


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


class AdaptedLinear:
    """Frozen base weight plus a trainable low-rank pair ``(B, A)``.

    Train-mode dropout acts on the adapter branch input. With
    ``dropout_target="update"`` the part of the branch present at init
    (``s B0 A0``, which OLoRA carved out of the pre-trained weight) is kept
    undropped, so only the learned change ``s (B A - B0 A0)`` sees dropped
    inputs. For LoRA ``B0 = 0`` and both targets coincide. Eval mode is
    unaffected either way.
    """

    def __init__(self, base, b, a, scale, dropout=0.0, method="lora", pretrained=None,
                 name="layer", dropout_target="update"):
        base = np.asarray(base)
        d, k = base.shape
        b = np.asarray(b, dtype=base.dtype)
        a = np.asarray(a, dtype=base.dtype)
        if b.ndim != 2 or a.ndim != 2 or b.shape[0] != d or a.shape[1] != k or b.shape[1] != a.shape[0]:
            raise ShapeError(f"{name}: factors {b.shape} x {a.shape} do not fit base {base.shape}")
        self.name = name
        self.base = Param(_frozen(base), f"{name}.W", trainable=False)
        self.b = Param(np.array(b, copy=True), f"{name}.B")
        self.a = Param(np.array(a, copy=True), f"{name}.A")
        self.scale = float(scale)
        self.dropout = float(dropout)
        self.method = method
        self.pretrained = self.base.value if pretrained is None else _frozen(pretrained)
        self.dropout_target = dropout_target
        self.init_product = None
        if dropout_target == "update" and np.any(b):
            self.init_product = _frozen(b @ a)

    @property
    def rank(self):
        return self.a.value.shape[0]

    @property
    def shape(self):
        return self.base.value.shape

    def params(self):
        return [self.b, self.a]

    def effective_weight(self):
        return merge(self)

    def apply(self, tape, x, train_mode=False, rng=None):
        """Record ``x W^T + s * drop(x) A^T B^T`` on ``tape``; x is (..., k)."""
        base = tape.matmul(x, tape.param(self.base), transpose_b=True, name=f"{self.name}.base")
        xa = x
        mask = None
        if train_mode and self.dropout > 0.0:
            mask = dropout_mask(x.shape, self.dropout, rng, x.value.dtype)
            xa = tape.dropout(x, mask, name=f"{self.name}.drop")
        low = tape.matmul(xa, tape.param(self.a), transpose_b=True, name=f"{self.name}.A")
        up = tape.matmul(low, tape.param(self.b), transpose_b=True, name=f"{self.name}.B")
        out = tape.add(base, tape.scale(up, self.scale), name=f"{self.name}.out")
        if mask is not None and self.init_product is not None:
            # restore the dropped share of the init branch: s B0 A0 (x - drop(x))
            rest = tape.dropout(x, 1.0 - mask, name=f"{self.name}.keep")
            fix = tape.matmul(rest, tape.const(self.init_product, f"{self.name}.B0A0"),
                              transpose_b=True, name=f"{self.name}.init")
            out = tape.add(out, tape.scale(fix, self.scale), name=f"{self.name}.out")
        return out


def dropout_mask(shape, p, rng, dtype=np.float64):
    """Inverted-dropout mask: kept entries scaled by 1 / (1 - p)."""
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def _check_rank(w, cfg, expected):
    if cfg.method != expected:
        raise ConfigError(f"{expected}_init called with method {cfg.method!r}")
    d, k = w.shape
    if cfg.rank > min(d, k):
        raise RankError(f"rank {cfg.rank} exceeds min(d, k) = {min(d, k)} for a {d}x{k} weight")


def lora_init(w, cfg, rng=None, name="layer"):
    """B = 0, A ~ U(-1/sqrt(k), 1/sqrt(k)); the effective weight is exactly ``w``."""
    w = np.asarray(w)
    _check_rank(w, cfg, "lora")
    d, k = w.shape
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    bound = 1.0 / np.sqrt(k)
    a = rng.uniform(-bound, bound, size=(cfg.rank, k)).astype(w.dtype)
    b = np.zeros((d, cfg.rank), dtype=w.dtype)
    return AdaptedLinear(w, b, a, cfg.s, cfg.dropout, "lora", pretrained=w, name=name,
                         dropout_target=cfg.dropout_target)


def olora_init(w, cfg, name="layer"):
    w = np.asarray(w)
    _check_rank(w, cfg, "olora")
    if not np.all(np.isfinite(w)):
        raise NumericError(f"{name}: pre-trained weight has non-finite entries")
    q_r, r_r = thin_qr(w, cfg.rank)
    s = cfg.s
    base = w - s * (q_r @ r_r)
    return AdaptedLinear(base, q_r, r_r, s, cfg.dropout, "olora", pretrained=w, name=name,
                         dropout_target=cfg.dropout_target)


def init_adapter(w, cfg, rng=None, name="layer"):
    if cfg.method == "lora":
        return lora_init(w, cfg, rng=rng, name=name)
    return olora_init(w, cfg, name=name)


def adapted_forward(layer, x, train_mode=False, rng=None):
    """Column-convention forward: x is k x batch, result is d x batch."""
    x = np.asarray(x)
    d, k = layer.shape
    if x.ndim != 2 or x.shape[0] != k:
        raise ShapeError(f"{layer.name}: input {x.shape} does not have {k} rows")
    xa = x
    if train_mode and layer.dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        mask = dropout_mask(x.shape, layer.dropout, rng, x.dtype)
        xa = x * mask
        h = layer.base.value @ x + layer.scale * (layer.b.value @ (layer.a.value @ xa))
        if layer.init_product is not None:
            h = h + layer.scale * (layer.init_product @ (x * (1.0 - mask)))
        return h
    return layer.base.value @ x + layer.scale * (layer.b.value @ (layer.a.value @ xa))


def merge(layer):
    """Dense weight ``W + s B A`` for adapter-free inference."""
    return layer.base.value + layer.scale * (layer.b.value @ layer.a.value)


def swap_adapter(layer, new_b, new_a):
    """Same frozen base, new factor pair."""
    new_b = np.asarray(new_b)
    new_a = np.asarray(new_a)
    d, k = layer.shape
    if new_b.ndim != 2 or new_a.ndim != 2 or new_b.shape[0] != d or new_a.shape[1] != k \
            or new_b.shape[1] != new_a.shape[0]:
        raise ShapeError(f"{layer.name}: cannot swap in {new_b.shape} x {new_a.shape} "
                         f"for base {layer.shape}")
    out = AdaptedLinear.__new__(AdaptedLinear)
    out.__dict__.update(layer.__dict__)
    out.b = Param(np.array(new_b, dtype=layer.base.value.dtype), layer.b.name)
    out.a = Param(np.array(new_a, dtype=layer.base.value.dtype), layer.a.name)
    return out


def spectral_diagnose(layer):
    """Spectra of the pre-trained weight and of ``B A``, plus ``|B^T B - I|_F``.

    ``subset_gap`` is the largest distance from a singular value of ``B A`` to
    the nearest singular value of the pre-trained weight. It is only reported;
    for a truncated QR it is generally nonzero.
    """
    if max(layer.shape) > SVD_MAX_DIM:
        raise SizeError(f"{layer.name}: {layer.shape} too large for the diagnostic")
    w = np.asarray(layer.pretrained, dtype=np.float64)
    b = np.asarray(layer.b.value, dtype=np.float64)
    a = np.asarray(layer.a.value, dtype=np.float64)
    sigma_w = svd_values(w)
    sigma_ba = svd_values(b @ a)[: layer.rank]
    drift = frobenius_norm(b.T @ b - np.eye(b.shape[1]))
    gap = float(np.max(np.min(np.abs(sigma_ba[:, None] - sigma_w[None, :]), axis=1)))
    return {
        "layer": layer.name,
        "method": layer.method,
        "rank": layer.rank,
        "sigma_pretrained": sigma_w.tolist(),
        "sigma_ba": sigma_ba.tolist(),
        "orthonormality_drift": drift,
        "subset_gap": gap,
    }
