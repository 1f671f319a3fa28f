"""Tiny causal transformer LM with exact gradients for LoRA adapters.

Layout follows the LLaMA family at toy scale: pre-norm RMSNorm blocks,
rotary position embeddings, grouped key/value heads (``d_kv_out < d_q_out``)
and a SiLU feed-forward. Projections use the row-vector convention
``y = x @ W`` so a target matrix has shape ``(d_in, d_out)``; an attached
adapter pair contributes ``scale * (x @ A) @ B``.

Only adapter parameters receive gradients. Base weights are frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputError, NumericError
from .numerics import Matrix, Rng
from .vocab import EOS_ID, NO_ID, PAD_ID, YES_ID

if TYPE_CHECKING:
    from .lora import AdapterSet

TARGETS = ("q", "k", "v", "o")
INIT_STD = 0.02
NORM_EPS = 1e-6
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelGeometry:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_q_out: int
    d_kv_out: int
    d_ff: int
    max_seq: int
    total_base_params: int | None = None

    def __post_init__(self):
        if self.d_q_out % self.n_heads:
            raise ConfigError(f"d_q_out={self.d_q_out} not divisible by n_heads={self.n_heads}")
        if self.d_kv_out > self.d_q_out:
            raise ConfigError("d_kv_out must not exceed d_q_out")
        if self.d_kv_out % self.head_dim or self.n_heads % self.n_kv_heads:
            raise ConfigError("d_kv_out must be a whole number of heads dividing n_heads")
        if self.head_dim % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.max_seq < 2:
            raise ConfigError("max_seq must be at least 2")

    @property
    def head_dim(self) -> int:
        return self.d_q_out // self.n_heads

    @property
    def n_kv_heads(self) -> int:
        return self.d_kv_out // self.head_dim

    def target_shape(self, target: str) -> tuple[int, int]:
        shapes = {
            "q": (self.d_model, self.d_q_out),
            "k": (self.d_model, self.d_kv_out),
            "v": (self.d_model, self.d_kv_out),
            "o": (self.d_q_out, self.d_model),
        }
        if target not in shapes:
            raise ConfigError(f"unknown projection target {target!r}")
        return shapes[target]

    def count_base_params(self) -> int:
        d = self.d_model
        per_layer = sum(a * b for a, b in map(self.target_shape, TARGETS))
        per_layer += 2 * d * self.d_ff + 2 * d
        return 2 * self.vocab_size * d + self.n_layers * per_layer + d

    @classmethod
    def preset(cls, name: str) -> ModelGeometry:
        if name not in PRESETS:
            raise ConfigError(f"unknown geometry preset {name!r}; choose from {sorted(PRESETS)}")
        return PRESETS[name]


_TOY = ModelGeometry(
    vocab_size=64, d_model=32, n_layers=2, n_heads=2, d_q_out=32, d_kv_out=16, d_ff=64, max_seq=128
)
PRESETS = {
    "toy": replace(_TOY, total_base_params=_TOY.count_base_params()),
    # Shape-only stand-in for LLaMA-3 8B, used for parameter accounting.
    "llama3-8b-accounting": ModelGeometry(
        vocab_size=128256,
        d_model=4096,
        n_layers=32,
        n_heads=32,
        d_q_out=4096,
        d_kv_out=1024,
        d_ff=14336,
        max_seq=8192,
        total_base_params=8_030_000_000,
    ),
}


@dataclass
class LayerWeights:
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    w_up: Matrix
    w_down: Matrix
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    def projection(self, target: str) -> Matrix:
        return getattr(self, "w" + target)


@dataclass
class TransformerWeights:
    geometry: ModelGeometry
    embed: Matrix
    layers: list[LayerWeights]
    final_norm: np.ndarray
    out: Matrix

    def copy(self) -> TransformerWeights:
        layers = [LayerWeights(**{k: v.copy() for k, v in vars(lw).items()}) for lw in self.layers]
        return TransformerWeights(self.geometry, self.embed.copy(), layers, self.final_norm.copy(), self.out.copy())

    def projection(self, layer: int, target: str) -> Matrix:
        return self.layers[layer].projection(target)

    def arrays(self) -> list[np.ndarray]:
        out = [self.embed]
        for lw in self.layers:
            out.extend(vars(lw).values())
        return out + [self.final_norm, self.out]

    def equals(self, other: TransformerWeights) -> bool:
        return self.geometry == other.geometry and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


def init_weights(geometry: ModelGeometry, seed: int) -> TransformerWeights:
    """Normal(0, 0.02) matrices and unit normalization gains, deterministic in ``seed``."""
    g = geometry
    rng = Rng(seed)

    def mat(rows: int, cols: int) -> Matrix:
        return rng.normal(rows * cols, INIT_STD).reshape(rows, cols)

    embed = mat(g.vocab_size, g.d_model)
    layers = []
    for _ in range(g.n_layers):
        layers.append(
            LayerWeights(
                wq=mat(*g.target_shape("q")),
                wk=mat(*g.target_shape("k")),
                wv=mat(*g.target_shape("v")),
                wo=mat(*g.target_shape("o")),
                w_up=mat(g.d_model, g.d_ff),
                w_down=mat(g.d_ff, g.d_model),
                attn_norm=np.ones(g.d_model),
                ffn_norm=np.ones(g.d_model),
            )
        )
    return TransformerWeights(g, embed, layers, np.ones(g.d_model), mat(g.d_model, g.vocab_size))


@dataclass
class Batch:
    """Right-padded token rows plus a mask of supervised (completion) positions.

    ``mask[b, i] = 1`` means token ``i`` of row ``b`` is a prediction target
    (predicted from position ``i - 1``).
    """

    tokens: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.tokens.ndim != 2 or self.mask.shape != self.tokens.shape:
            raise InputError(f"tokens {self.tokens.shape} and mask {self.mask.shape} must be equal 2-D shapes")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
        """Build a batch from (prompt, completion) id sequences."""
        width = max(len(p) + len(c) for p, c in pairs)
        tokens = np.full((len(pairs), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(pairs), width))
        for row, (prompt, completion) in enumerate(pairs):
            seq = list(prompt) + list(completion)
            tokens[row, : len(seq)] = seq
            mask[row, len(prompt) : len(seq)] = 1.0
        return cls(tokens, mask)


# -- building blocks -------------------------------------------------------


def _rope_tables(seq_len: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half) / half)
    angles = np.arange(seq_len)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def _rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    # x: (B, heads, S, hd); rotate-half convention
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    s = -sin if inverse else sin
    return np.concatenate([x1 * cos - x2 * s, x1 * s + x2 * cos], axis=-1)


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, tuple]:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    xhat = x * inv
    return xhat * gain, (xhat, inv, gain)


def _rmsnorm_back(dy: np.ndarray, cache: tuple) -> np.ndarray:
    xhat, inv, gain = cache
    dxhat = dy * gain
    return inv * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _Projection:
    """``x @ W`` plus an optional adapter path, with a cache for backward."""

    def __init__(self, weight: Matrix, pair=None, scale: float = 0.0, keep: np.ndarray | None = None):
        self.weight = weight
        self.pair = pair
        self.scale = scale
        self.keep = keep

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        y = x @ self.weight
        if self.pair is not None:
            xd = x if self.keep is None else x * self.keep
            self.xd = xd
            self.xa = xd @ self.pair.A
            y = y + self.scale * (self.xa @ self.pair.B)
        return y

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, Matrix | None, Matrix | None]:
        dx = dy @ self.weight.T
        if self.pair is None:
            return dx, None, None
        d_in, d_out = self.weight.shape
        dy2 = dy.reshape(-1, d_out)
        dya = (dy2 @ self.pair.B.T) * self.scale
        grad_b = self.scale * (self.xa.reshape(-1, self.xa.shape[-1]).T @ dy2)
        grad_a = self.xd.reshape(-1, d_in).T @ dya
        dxd = (dya @ self.pair.A.T).reshape(dx.shape)
        if self.keep is not None:
            dxd = dxd * self.keep
        return dx + dxd, grad_a, grad_b


def _adapter_lookup(adapters: AdapterSet | None):
    if adapters is None:
        return {}, 0.0, 0.0
    return adapters.pairs, adapters.scale, adapters.config.dropout


def _check_tokens(weights: TransformerWeights, tokens: np.ndarray) -> None:
    g = weights.geometry
    if tokens.ndim != 2:
        raise InputError(f"token batch must be 2-D, got shape {tokens.shape}")
    if tokens.shape[1] > g.max_seq:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds max_seq={g.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= g.vocab_size):
        raise InputError(f"token id outside [0, {g.vocab_size})")


class _Pass:
    """One forward pass retaining what backward needs."""

    def __init__(self, weights: TransformerWeights, adapters: AdapterSet | None, dropout_rng: Rng | None):
        self.w = weights
        self.g = weights.geometry
        self.pairs, self.scale, self.dropout = _adapter_lookup(adapters)
        self.rng = dropout_rng if self.dropout > 0 else None

    def _proj(self, layer: int, target: str, shape_in: tuple) -> _Projection:
        pair = self.pairs.get((layer, target))
        keep = None
        if pair is not None and self.rng is not None:
            n = int(np.prod(shape_in))
            keep = self.rng.bernoulli(1.0 - self.dropout, n).reshape(shape_in) / (1.0 - self.dropout)
        return _Projection(self.w.projection(layer, target), pair, self.scale, keep)

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        g = self.g
        B, S = tokens.shape
        H, G, hd = g.n_heads, g.n_kv_heads, g.head_dim
        self.tokens = tokens
        self.cos, self.sin = _rope_tables(S, hd)
        self.causal = np.triu(np.ones((S, S), dtype=bool), k=1)
        h = self.w.embed[tokens]
        self.caches = []
        for li, lw in enumerate(self.w.layers):
            c = {}
            a, c["norm1"] = _rmsnorm(h, lw.attn_norm)
            c["q"] = self._proj(li, "q", a.shape)
            c["k"] = self._proj(li, "k", a.shape)
            c["v"] = self._proj(li, "v", a.shape)
            q = c["q"](a).reshape(B, S, H, hd).transpose(0, 2, 1, 3)
            k = c["k"](a).reshape(B, S, G, hd).transpose(0, 2, 1, 3)
            v = c["v"](a).reshape(B, S, G, hd).transpose(0, 2, 1, 3)
            q = _rope(q, self.cos, self.sin)
            k = _rope(k, self.cos, self.sin)
            rep = H // G
            k_rep = np.repeat(k, rep, axis=1)
            v_rep = np.repeat(v, rep, axis=1)
            scores = (q @ k_rep.transpose(0, 1, 3, 2)) / math.sqrt(hd)
            scores = np.where(self.causal, -np.inf, scores)
            scores = scores - scores.max(axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=-1, keepdims=True)
            ctx = (probs @ v_rep).transpose(0, 2, 1, 3).reshape(B, S, H * hd)
            c.update(q_rot=q, k_rep=k_rep, v_rep=v_rep, probs=probs)
            c["o"] = self._proj(li, "o", ctx.shape)
            h = h + c["o"](ctx)
            f, c["norm2"] = _rmsnorm(h, lw.ffn_norm)
            u = f @ lw.w_up
            sig = _sigmoid(u)
            act = u * sig
            h = h + act @ lw.w_down
            c.update(f=f, u=u, sig=sig)
            self.caches.append(c)
        hf, self.final_cache = _rmsnorm(h, self.w.final_norm)
        return hf @ self.w.out

    def backward(self, dlogits: np.ndarray) -> dict[tuple[int, str], tuple[Matrix, Matrix]]:
        g = self.g
        B, S = self.tokens.shape
        H, G, hd = g.n_heads, g.n_kv_heads, g.head_dim
        rep = H // G
        grads: dict[tuple[int, str], tuple[Matrix, Matrix]] = {}
        dh = _rmsnorm_back(dlogits @ self.w.out.T, self.final_cache)
        for li in reversed(range(len(self.w.layers))):
            lw, c = self.w.layers[li], self.caches[li]
            # feed-forward residual branch
            dact = dh @ lw.w_down.T
            sig, u = c["sig"], c["u"]
            du = dact * sig * (1.0 + u * (1.0 - sig))
            dh = dh + _rmsnorm_back(du @ lw.w_up.T, c["norm2"])
            # attention residual branch
            dctx, ga, gb = c["o"].backward(dh)
            if ga is not None:
                grads[(li, "o")] = (ga, gb)
            dctx = dctx.reshape(B, S, H, hd).transpose(0, 2, 1, 3)
            probs = c["probs"]
            dprobs = dctx @ c["v_rep"].transpose(0, 1, 3, 2)
            dv_rep = probs.transpose(0, 1, 3, 2) @ dctx
            dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
            dscores /= math.sqrt(hd)
            dq = dscores @ c["k_rep"]
            dk_rep = dscores.transpose(0, 1, 3, 2) @ c["q_rot"]
            dk = dk_rep.reshape(B, G, rep, S, hd).sum(axis=2)
            dv = dv_rep.reshape(B, G, rep, S, hd).sum(axis=2)
            dq = _rope(dq, self.cos, self.sin, inverse=True)
            dk = _rope(dk, self.cos, self.sin, inverse=True)
            da = np.zeros((B, S, g.d_model))
            for target, d in (("q", dq), ("k", dk), ("v", dv)):
                d2 = d.transpose(0, 2, 1, 3).reshape(B, S, -1)
                dx, ga, gb = c[target].backward(d2)
                da += dx
                if ga is not None:
                    grads[(li, target)] = (ga, gb)
            dh = dh + _rmsnorm_back(da, c["norm1"])
        return grads


def forward(
    weights: TransformerWeights,
    adapters: AdapterSet | None,
    batch: Batch | np.ndarray,
) -> np.ndarray:
    """Logits of shape ``(batch, seq_len, vocab)``; dropout-free."""
    tokens = batch.tokens if isinstance(batch, Batch) else np.asarray(batch, dtype=np.int64)
    _check_tokens(weights, tokens)
    return _Pass(weights, adapters, None).forward(tokens)


def _masked_ce(logits: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    B = logits.shape[0]
    targets = batch.tokens[:, 1:]
    mask = batch.mask[:, 1:]
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DataError("degenerate batch: a row has no supervised positions")
    weight = mask / (counts[:, None] * B)
    z = logits[:, :-1, :]
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(weight * picked).sum())
    dlogits = np.zeros_like(logits)
    dz = np.exp(logp)
    np.put_along_axis(dz, targets[..., None], np.take_along_axis(dz, targets[..., None], -1) - 1.0, axis=-1)
    dlogits[:, :-1, :] = dz * weight[..., None]
    return loss, dlogits


def sequence_loss(weights: TransformerWeights, adapters: AdapterSet | None, batch: Batch) -> float:
    _check_tokens(weights, batch.tokens)
    logits = _Pass(weights, adapters, None).forward(batch.tokens)
    return _masked_ce(logits, batch)[0]


def loss_and_grads(
    weights: TransformerWeights,
    adapters: AdapterSet,
    batch: Batch,
    dropout_rng: Rng | None = None,
) -> tuple[float, dict[tuple[int, str], tuple[Matrix, Matrix]]]:
    """Mean (over rows) of per-row mean masked cross-entropy, and adapter gradients.

    Gradients are keyed like ``adapters.pairs`` and hold ``(dA, dB)``.
    Adapter dropout is applied only when ``dropout_rng`` is given.
    """
    if adapters is None or not adapters.pairs:
        raise InputError("loss_and_grads needs an attached, non-empty adapter set")
    _check_tokens(weights, batch.tokens)
    p = _Pass(weights, adapters, dropout_rng)
    logits = p.forward(batch.tokens)
    loss, dlogits = _masked_ce(logits, batch)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, p.backward(dlogits)


# -- inference -------------------------------------------------------------


def generate_batch(
    weights: TransformerWeights,
    adapters: AdapterSet | None,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    eos_id: int = EOS_ID,
) -> list[list[int]]:
    """Greedy decoding for many prompts; equal-length prompts share a batch.

    Each result is the prompt followed by the generated ids, without the
    end-of-sequence token.
    """
    g = weights.geometry
    results: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        if len(p) + max_new > g.max_seq:
            raise InputError(f"prompt length {len(p)} + max_new {max_new} exceeds max_seq={g.max_seq}")
        groups.setdefault(len(p), []).append(i)
    for idx in groups.values():
        seqs = np.array([list(prompts[i]) for i in idx], dtype=np.int64)
        done = np.zeros(len(idx), dtype=bool)
        produced: list[list[int]] = [[] for _ in idx]
        for _ in range(max_new):
            logits = forward(weights, adapters, seqs)[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            for row, tok in enumerate(nxt):
                if not done[row]:
                    if tok == eos_id:
                        done[row] = True
                    else:
                        produced[row].append(int(tok))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        for row, i in enumerate(idx):
            results[i] = list(prompts[i]) + produced[row]
    return results


def generate(
    weights: TransformerWeights,
    adapters: AdapterSet | None,
    prompt: Sequence[int],
    max_new: int,
    eos_id: int = EOS_ID,
) -> list[int]:
    return generate_batch(weights, adapters, [prompt], max_new, eos_id)[0]


def answer_logits(
    weights: TransformerWeights, adapters: AdapterSet | None, prompts: Sequence[Sequence[int]]
) -> np.ndarray:
    """Next-token logits after each prompt, shape ``(len(prompts), vocab)``."""
    out = np.zeros((len(prompts), weights.geometry.vocab_size))
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    for idx in groups.values():
        logits = forward(weights, adapters, np.array([prompts[i] for i in idx]))
        out[idx] = logits[:, -1, :]
    return out


def yes_no_from_logits(logits: np.ndarray, yes_id: int = YES_ID, no_id: int = NO_ID) -> str:
    # exact ties resolve to "no"
    return "yes" if logits[yes_id] > logits[no_id] else "no"


def classify_yes_no(
    weights: TransformerWeights,
    adapters: AdapterSet | None,
    prompt: Sequence[int],
    yes_id: int = YES_ID,
    no_id: int = NO_ID,
) -> str:
    return yes_no_from_logits(answer_logits(weights, adapters, [prompt])[0], yes_id, no_id)
