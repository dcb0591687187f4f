"""Tiny decoder-only transformer policy with low-rank adapters.

Parameters live in a flat ``name -> tensor`` mapping so that snapshots,
merging and checkpointing are plain dictionary operations. Gradients come
from torch autograd; ``backward`` wraps it with the finiteness checks and
the congruent-store contract the training loops rely on.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

ADAPTED_MAPS = ("wq", "wk", "wv", "wo")


class SequenceTooLong(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite values in {name}")
        self.name = name


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    context_length: int = 768
    vocab_size: int = 107

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("rotary positions need an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> dict[str, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)

    def normal(*shape, std=0.02):
        return (torch.randn(*shape, generator=gen, dtype=torch.float64) * std).to(dtype)

    d, f = cfg.d_model, cfg.d_ff
    # residual projections scaled down with depth
    out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    p = {
        "tok_emb": normal(cfg.vocab_size, d),
    }
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.weight"] = torch.ones(d, dtype=dtype)
        p[pre + "ln1.bias"] = torch.zeros(d, dtype=dtype)
        p[pre + "attn.wq"] = normal(d, d)
        p[pre + "attn.wk"] = normal(d, d)
        p[pre + "attn.wv"] = normal(d, d)
        p[pre + "attn.wo"] = normal(d, d, std=out_std)
        p[pre + "ln2.weight"] = torch.ones(d, dtype=dtype)
        p[pre + "ln2.bias"] = torch.zeros(d, dtype=dtype)
        p[pre + "mlp.w1"] = normal(d, f)
        p[pre + "mlp.b1"] = torch.zeros(f, dtype=dtype)
        p[pre + "mlp.w2"] = normal(f, d, std=out_std)
        p[pre + "mlp.b2"] = torch.zeros(d, dtype=dtype)
    p["ln_f.weight"] = torch.ones(d, dtype=dtype)
    p["ln_f.bias"] = torch.zeros(d, dtype=dtype)
    p["head"] = normal(d, cfg.vocab_size)
    return p


class AdapterSet:
    """Low-rank deltas on the attention projections: W + (alpha/rank) * down @ up."""

    def __init__(self, factors: dict[str, tuple[torch.Tensor, torch.Tensor]], rank: int, alpha: float,
                 enabled: bool = True):
        self.factors = factors
        self.rank = rank
        self.alpha = alpha
        self.enabled = enabled

    @classmethod
    def create(cls, cfg: ModelConfig, rank: int = 4, alpha: float = 8.0, seed: int = 0,
               dtype=torch.float32, init_up: str = "zeros") -> "AdapterSet":
        gen = torch.Generator().manual_seed(seed)
        factors = {}
        for i in range(cfg.n_layers):
            for m in ADAPTED_MAPS:
                down = torch.randn(cfg.d_model, rank, generator=gen, dtype=torch.float64) / math.sqrt(cfg.d_model)
                if init_up == "zeros":
                    up = torch.zeros(rank, cfg.d_model, dtype=torch.float64)
                else:
                    up = torch.randn(rank, cfg.d_model, generator=gen, dtype=torch.float64) * 0.1
                factors[f"layers.{i}.attn.{m}"] = (down.to(dtype), up.to(dtype))
        return cls(factors, rank, alpha)

    @classmethod
    def empty(cls) -> "AdapterSet":
        return cls({}, rank=0, alpha=0.0, enabled=False)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def is_empty(self) -> bool:
        return not self.factors

    def delta(self, name: str) -> torch.Tensor:
        down, up = self.factors[name]
        return self.scale * (down @ up)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, (down, up) in self.factors.items():
            out[name + ".down"] = down
            out[name + ".up"] = up
        return out

    def clone(self) -> "AdapterSet":
        factors = {k: (d.detach().clone(), u.detach().clone()) for k, (d, u) in self.factors.items()}
        return AdapterSet(factors, self.rank, self.alpha, self.enabled)

    def requires_grad_(self, flag: bool = True) -> "AdapterSet":
        for d, u in self.factors.values():
            d.requires_grad_(flag)
            u.requires_grad_(flag)
        return self


def _layer_norm(x, w, b):
    return F.layer_norm(x, (x.shape[-1],), w, b, eps=1e-5)


_ROPE_CACHE: dict = {}


def rope_tables(cfg: ModelConfig, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (context_length, head_dim // 2), base 10000."""
    key = (cfg.context_length, cfg.head_dim, dtype)
    if key not in _ROPE_CACHE:
        half = cfg.head_dim // 2
        inv = 1.0 / (10000.0 ** (torch.arange(half, dtype=torch.float64) / half))
        ang = torch.arange(cfg.context_length, dtype=torch.float64)[:, None] * inv[None, :]
        _ROPE_CACHE[key] = (ang.cos().to(dtype), ang.sin().to(dtype))
    return _ROPE_CACHE[key]


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (first half, second half) channel pairs of ``x`` (..., T, hd) by position angles (T, hd/2)."""
    half = x.shape[-1] // 2
    a, b = x[..., :half], x[..., half:]
    return torch.cat([a * cos - b * sin, a * sin + b * cos], dim=-1)


def _weight(params, adapters, name):
    w = params[name]
    if adapters is not None and adapters.enabled and name in adapters.factors:
        down, up = adapters.factors[name]
        # applied in merged form so that merging reproduces the same arithmetic
        w = w + adapters.scale * (down @ up)
    return w


def forward_logits(tokens: torch.Tensor, params: Mapping[str, torch.Tensor], cfg: ModelConfig,
                   adapters: AdapterSet | None = None) -> torch.Tensor:
    """Logits for a (B, T) or (T,) batch of token ids."""
    squeeze = tokens.dim() == 1
    if squeeze:
        tokens = tokens.unsqueeze(0)
    B, T = tokens.shape
    if T > cfg.context_length:
        raise SequenceTooLong(f"sequence of {T} tokens exceeds context length {cfg.context_length}")
    H, hd = cfg.n_heads, cfg.head_dim
    x = params["tok_emb"][tokens]
    cos, sin = rope_tables(cfg, x.dtype)
    cos, sin = cos[:T], sin[:T]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = _layer_norm(x, params[pre + "ln1.weight"], params[pre + "ln1.bias"])
        q = apply_rope((h @ _weight(params, adapters, pre + "attn.wq")).view(B, T, H, hd).transpose(1, 2), cos, sin)
        k = apply_rope((h @ _weight(params, adapters, pre + "attn.wk")).view(B, T, H, hd).transpose(1, 2), cos, sin)
        v = (h @ _weight(params, adapters, pre + "attn.wv")).view(B, T, H, hd).transpose(1, 2)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True).transpose(1, 2).reshape(B, T, cfg.d_model)
        x = x + y @ _weight(params, adapters, pre + "attn.wo")
        h = _layer_norm(x, params[pre + "ln2.weight"], params[pre + "ln2.bias"])
        h = F.gelu(h @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
        x = x + h @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"]
    x = _layer_norm(x, params["ln_f.weight"], params["ln_f.bias"])
    logits = x @ params["head"]
    return logits[0] if squeeze else logits


def forward_logprobs(tokens, params, cfg: ModelConfig, adapters: AdapterSet | None = None) -> torch.Tensor:
    """Row p is the log-distribution of the token following position p."""
    if not torch.is_tensor(tokens):
        tokens = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
    return forward_logits(tokens, params, cfg, adapters).log_softmax(-1)


class KVCache:
    """Per-layer key/value buffers for lock-step incremental decoding of a batch."""

    def __init__(self, cfg: ModelConfig, batch: int, length: int, dtype=torch.float32):
        shape = (batch, cfg.n_heads, length, cfg.head_dim)
        self.k = [torch.zeros(shape, dtype=dtype) for _ in range(cfg.n_layers)]
        self.v = [torch.zeros(shape, dtype=dtype) for _ in range(cfg.n_layers)]
        self.length = length

    @property
    def batch(self) -> int:
        return self.k[0].shape[0]

    def select(self, rows: list[int]) -> None:
        """Keep only the given batch rows (drops finished sequences)."""
        index = torch.as_tensor(rows, dtype=torch.long)
        self.k = [t.index_select(0, index) for t in self.k]
        self.v = [t.index_select(0, index) for t in self.v]


@torch.no_grad()
def step_logprobs(tokens: torch.Tensor, pos: int, cache: KVCache, params, cfg: ModelConfig,
                  adapters: AdapterSet | None = None) -> torch.Tensor:
    """Feed one token per sequence at position ``pos``; return next-token log-probs (B, V)."""
    if pos >= cfg.context_length or pos >= cache.length:
        raise SequenceTooLong(f"position {pos} exceeds context length {cfg.context_length}")
    B = tokens.shape[0]
    H, hd = cfg.n_heads, cfg.head_dim
    x = params["tok_emb"][tokens]
    cos, sin = rope_tables(cfg, x.dtype)
    cos, sin = cos[pos], sin[pos]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = _layer_norm(x, params[pre + "ln1.weight"], params[pre + "ln1.bias"])
        q = apply_rope((h @ _weight(params, adapters, pre + "attn.wq")).view(B, H, 1, hd), cos, sin)
        cache.k[i][:, :, pos] = apply_rope((h @ _weight(params, adapters, pre + "attn.wk")).view(B, H, hd), cos, sin)
        cache.v[i][:, :, pos] = (h @ _weight(params, adapters, pre + "attn.wv")).view(B, H, hd)
        y = F.scaled_dot_product_attention(q, cache.k[i][:, :, : pos + 1], cache.v[i][:, :, : pos + 1])
        y = y.reshape(B, cfg.d_model)
        x = x + y @ _weight(params, adapters, pre + "attn.wo")
        h = _layer_norm(x, params[pre + "ln2.weight"], params[pre + "ln2.bias"])
        h = F.gelu(h @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
        x = x + h @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"]
    x = _layer_norm(x, params["ln_f.weight"], params["ln_f.bias"])
    return (x @ params["head"]).log_softmax(-1)


class Policy:
    """Base parameters plus an optional adapter set; the unit the rollout engine decodes with."""

    def __init__(self, cfg: ModelConfig, params: dict[str, torch.Tensor], adapters: AdapterSet | None = None):
        self.cfg = cfg
        self.params = params
        self.adapters = adapters if adapters is not None else AdapterSet.empty()

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> "Policy":
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def logprobs(self, tokens, adapters: AdapterSet | None | bool = True) -> torch.Tensor:
        ad = self.adapters if adapters is True else (None if adapters is False else adapters)
        return forward_logprobs(tokens, self.params, self.cfg, ad)

    def new_cache(self, batch: int, length: int) -> KVCache:
        return KVCache(self.cfg, batch, min(length, self.cfg.context_length), self.dtype)

    def step(self, tokens: torch.Tensor, pos: int, cache: KVCache) -> torch.Tensor:
        return step_logprobs(tokens, pos, cache, self.params, self.cfg, self.adapters)

    def snapshot(self) -> "PolicySnapshot":
        return PolicySnapshot(self.cfg, self.params, self.adapters)

    def to(self, dtype) -> "Policy":
        params = {k: v.detach().to(dtype) for k, v in self.params.items()}
        adapters = self.adapters.clone()
        adapters.factors = {k: (d.to(dtype), u.to(dtype)) for k, (d, u) in adapters.factors.items()}
        return Policy(self.cfg, params, adapters)

    def n_params(self) -> int:
        return sum(t.numel() for t in self.params.values())


def tensor_checksum(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().contiguous().numpy().tobytes())
    return h.hexdigest()


class PolicySnapshot:
    """Frozen deep copy of a policy; forward passes never touch the live tensors."""

    def __init__(self, cfg: ModelConfig, params: Mapping[str, torch.Tensor], adapters: AdapterSet | None = None):
        self.cfg = cfg
        self._params = {k: v.detach().clone() for k, v in params.items()}
        self._adapters = adapters.clone() if adapters is not None and not adapters.is_empty() else None
        self._checksum = self.checksum()

    def checksum(self) -> str:
        tensors = dict(self._params)
        if self._adapters is not None:
            tensors.update({"adapter." + k: v for k, v in self._adapters.tensors().items()})
        return tensor_checksum(tensors)

    def verify(self) -> bool:
        return self.checksum() == self._checksum

    @torch.no_grad()
    def logprobs(self, tokens, adapters: bool = True) -> torch.Tensor:
        ad = self._adapters if adapters else None
        return forward_logprobs(tokens, self._params, self.cfg, ad)

    def to_policy(self) -> Policy:
        adapters = self._adapters.clone() if self._adapters is not None else None
        return Policy(self.cfg, {k: v.clone() for k, v in self._params.items()}, adapters)


def backward(loss: torch.Tensor, tensors: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss for every named tensor (zeros where unused)."""
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteError("loss")
    names = list(tensors)
    if not names:
        return {}
    grads = torch.autograd.grad(loss, [tensors[n] for n in names], allow_unused=True)
    store = {}
    for name, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(tensors[name])
        elif not torch.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name}")
        store[name] = g
    return store


def merge_adapters(params: Mapping[str, torch.Tensor], adapters: AdapterSet) -> dict[str, torch.Tensor]:
    """Absorb the adapter deltas into the base weights and empty the adapter set."""
    if adapters.is_empty():
        raise ValueError("adapter set is empty (already merged?)")
    merged = {k: v.detach().clone() for k, v in params.items()}
    for name, (down, up) in adapters.factors.items():
        if name not in merged:
            raise ValueError(f"adapter targets unknown weight {name}")
        w = merged[name]
        if down.shape != (w.shape[0], adapters.rank) or up.shape != (adapters.rank, w.shape[1]):
            raise ValueError(f"adapter shape mismatch for {name}: {tuple(down.shape)} x {tuple(up.shape)} vs {tuple(w.shape)}")
        merged[name] = w + adapters.scale * (down.detach() @ up.detach())
    adapters.factors = {}
    adapters.enabled = False
    return merged


def sample_batch(logprobs: torch.Tensor | np.ndarray, temperature: float, uniforms: np.ndarray,
                 allowed: np.ndarray | None = None) -> np.ndarray:
    """Inverse-CDF sampling of one token per row from softmax(logprobs / temperature).

    ``allowed`` is a boolean (B, V) or (V,) mask; disallowed entries get zero
    probability. Temperatures below 1e-6 take the argmax.
    """
    rows = logprobs.detach().double().numpy() if torch.is_tensor(logprobs) else np.asarray(logprobs, dtype=np.float64)
    rows = np.atleast_2d(rows)
    # -inf is a legal zero-probability entry; NaN, +inf and all -inf rows are not
    if np.isnan(rows).any() or np.isposinf(rows).any() or not np.isfinite(rows).any(axis=1).all():
        raise NonFiniteError("sampling distribution")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scaled = rows if temperature < 1e-6 else rows / temperature
    if allowed is not None:
        scaled = np.where(np.broadcast_to(allowed, scaled.shape), scaled, -np.inf)
    if temperature < 1e-6:
        return scaled.argmax(axis=1)
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    probs = np.exp(scaled)
    cdf = np.cumsum(probs, axis=1)
    targets = np.asarray(uniforms, dtype=np.float64).reshape(-1, 1) * cdf[:, -1:]
    idx = (cdf <= targets).sum(axis=1)
    # never land on a zero-probability entry at the top end
    last_ok = probs.shape[1] - 1 - np.argmax((probs > 0)[:, ::-1], axis=1)
    return np.minimum(idx, last_ok)


def sample_next(logprob_row, temperature: float, rng: np.random.Generator, allowed=None) -> int:
    u = np.array([rng.random()]) if temperature >= 1e-6 else np.zeros(1)
    return int(sample_batch(np.atleast_2d(np.asarray(
        logprob_row.detach().double().numpy() if torch.is_tensor(logprob_row) else logprob_row)),
        temperature, u, allowed)[0])


class Adam:
    """Adaptive-moment optimizer with bias correction over named tensors."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float | None = 1.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t = 0

    @torch.no_grad()
    def step(self, tensors: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor]) -> float:
        """Update ``tensors`` in place; returns the pre-clip global gradient norm."""
        for name, g in grads.items():
            if name not in tensors:
                raise KeyError(f"gradient for unknown tensor {name}")
            if g.shape != tensors[name].shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match {name} {tuple(tensors[name].shape)}")
        norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
        coef = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            coef = self.grad_clip / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name] * coef
            p = tensors[name]
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            update = (m / c1) / ((v / c2).sqrt() + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p.sub_(self.lr * update)
        return norm

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t: int, m: dict, v: dict) -> None:
        self.t, self.m, self.v = t, dict(m), dict(v)
