"""Dot-product Transformer encoders used for comparison.

Three variants share one block:

* ``vanilla``    post-layer-norm residual block, ReLU feed-forward, dropout.
* ``rezero``     no layer norm; each residual branch scaled by a zero-initialised scalar.
* ``orthogonal`` vanilla, with every square projection orthogonally parametrized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .model import POOLINGS, TASKS, ForwardResult, LengthError, VocabularyError, sinusoidal_table
from .ortho import OrthogonalParam
from .tensor import Tensor

VARIANTS = ("vanilla", "rezero", "orthogonal")


@dataclass
class BaselineConfig:
    layers: int = 4
    d: int = 64
    heads: int = 4
    d_ff: int | None = None
    variant: str = "vanilla"
    vocab_size: int = 32
    max_len: int = 128
    task: str = "classification"
    n_classes: int = 10
    pooling: str = "mean"
    dropout: float | None = None
    embed_init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        if self.dropout is None:
            self.dropout = 0.1 if self.variant == "vanilla" else 0.0

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


Weight = Union[Tensor, OrthogonalParam]


def _read(w: Weight) -> Tensor:
    return w.value() if isinstance(w, OrthogonalParam) else w


def dot_product_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                          bq: Tensor, bk: Tensor, bv: Tensor, bo: Tensor, heads: int,
                          mask=None, return_weights: bool = False):
    """Multi-head softmax(Q K^T / sqrt(d_h)) V, concatenated and output-projected.

    Padded key positions (mask == 0) receive no attention.
    """
    d = x.shape[-1]
    dh = d // heads
    q = T.add(T.matmul(x, wq), bq)
    k = T.add(T.matmul(x, wk), bk)
    v = T.add(T.matmul(x, wv), bv)
    bias = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        bias = Tensor(np.where(m > 0, 0.0, -1e9)[..., None, :])
    outs, weights = [], []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = T.slice_last(q, lo, hi), T.slice_last(k, lo, hi), T.slice_last(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
        if bias is not None:
            scores = T.add(scores, bias)
        p = T.softmax(scores, axis=-1)
        weights.append(p)
        outs.append(T.matmul(p, vh))
    out = T.add(T.matmul(T.concat(outs, axis=-1) if heads > 1 else outs[0], wo), bo)
    return (out, weights) if return_weights else out


class BaselineTransformer:
    kind = "baseline"

    def __init__(self, config: BaselineConfig):
        self.config = cfg = config
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        self.embedding = Tensor(rng.normal(0.0, cfg.embed_init_std, (cfg.vocab_size, d)),
                                requires_grad=True, name="embed")
        self.pe_table = sinusoidal_table(cfg.max_len, d)
        self.blocks: list[dict] = []
        ortho = cfg.variant == "orthogonal"
        for l in range(cfg.layers):
            p = f"layers.{l}"
            blk: dict = {}
            for w in ("wq", "wk", "wv", "wo"):
                if ortho:
                    blk[w] = OrthogonalParam(d, rng, 1.0 / np.sqrt(d), name=f"{p}.attn.{w}")
                else:
                    blk[w] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
                                    requires_grad=True, name=f"{p}.attn.{w}")
                blk["b" + w[1]] = Tensor(np.zeros(d), requires_grad=True, name=f"{p}.attn.b{w[1]}")
            blk["w1"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.d_ff)),
                               requires_grad=True, name=f"{p}.ffn.w1")
            blk["b1"] = Tensor(np.zeros(cfg.d_ff), requires_grad=True, name=f"{p}.ffn.b1")
            blk["w2"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(cfg.d_ff), (cfg.d_ff, d)),
                               requires_grad=True, name=f"{p}.ffn.w2")
            blk["b2"] = Tensor(np.zeros(d), requires_grad=True, name=f"{p}.ffn.b2")
            if cfg.variant == "rezero":
                blk["res_attn"] = Tensor(0.0, requires_grad=True, name=f"{p}.res_attn")
                blk["res_ffn"] = Tensor(0.0, requires_grad=True, name=f"{p}.res_ffn")
            else:
                for n in ("ln1", "ln2"):
                    blk[f"{n}_g"] = Tensor(np.ones(d), requires_grad=True, name=f"{p}.{n}.gamma")
                    blk[f"{n}_b"] = Tensor(np.zeros(d), requires_grad=True, name=f"{p}.{n}.beta")
            self.blocks.append(blk)
        out = cfg.n_classes if cfg.task == "classification" else cfg.vocab_size
        self.head_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, out)), requires_grad=True,
                             name="head.w")
        self.head_b = Tensor(np.zeros(out), requires_grad=True, name="head.b")

    def orthogonal_params(self) -> dict[str, OrthogonalParam]:
        return {w.raw.name: w for blk in self.blocks for w in blk.values()
                if isinstance(w, OrthogonalParam)}

    def parameters(self) -> dict[str, Tensor]:
        params = {"embed": self.embedding}
        for blk in self.blocks:
            for w in blk.values():
                t = w.raw if isinstance(w, OrthogonalParam) else w
                params[t.name] = t
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def embed_tokens(self, tokens) -> Tensor:
        """Token embedding plus (additive) sinusoidal position encoding."""
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[-1]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabularyError(f"token id out of range [0, {self.config.vocab_size})")
        if n > self.config.max_len:
            raise LengthError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        return T.add(T.take_rows(self.embedding, tokens), Tensor(self.pe_table[:n]))

    def block(self, x: Tensor, blk: dict, mask=None, rng=None) -> Tensor:
        cfg = self.config
        attn = dot_product_attention(
            x, _read(blk["wq"]), _read(blk["wk"]), _read(blk["wv"]), _read(blk["wo"]),
            blk["bq"], blk["bk"], blk["bv"], blk["bo"], cfg.heads, mask)
        if cfg.variant == "rezero":
            h = T.add(x, T.mul(blk["res_attn"], attn))
            ff = self._ffn(h, blk, rng)
            return T.add(h, T.mul(blk["res_ffn"], ff))
        h = T.layer_norm(T.add(x, T.dropout(attn, cfg.dropout, rng)), blk["ln1_g"], blk["ln1_b"])
        ff = self._ffn(h, blk, rng)
        return T.layer_norm(T.add(h, T.dropout(ff, cfg.dropout, rng)), blk["ln2_g"], blk["ln2_b"])

    def _ffn(self, h: Tensor, blk: dict, rng) -> Tensor:
        inner = T.relu(T.add(T.matmul(h, blk["w1"]), blk["b1"]))
        inner = T.dropout(inner, self.config.dropout, rng)
        return T.add(T.matmul(inner, blk["w2"]), blk["b2"])

    def encode(self, tokens, mask=None, rng=None) -> list[Tensor]:
        x = self.embed_tokens(tokens)
        if self.config.dropout > 0:
            x = T.dropout(x, self.config.dropout, rng)
        trace = [x]
        for blk in self.blocks:
            x = self.block(x, blk, mask, rng)
            trace.append(x)
        return trace

    def head(self, xl: Tensor, mask=None) -> Tensor:
        if self.config.task == "lm":
            return T.add(T.matmul(xl, self.head_w), self.head_b)
        pooled = T.max_pool(xl, mask) if self.config.pooling == "max" else T.mean_pool(xl, mask)
        return T.add(T.matmul(pooled, self.head_w), self.head_b)

    def forward(self, tokens, mask=None, rng: np.random.Generator | None = None) -> ForwardResult:
        """``rng`` switches dropout on (training); omit it for evaluation."""
        if mask is None:
            mask = np.ones(np.shape(tokens))
        trace = self.encode(tokens, mask, rng)
        return ForwardResult(trace, self.head(trace[-1], mask), None, None, None)

    def loss(self, result: ForwardResult, targets, mask=None) -> tuple[Tensor, Tensor]:
        if self.config.task == "lm":
            task = T.cross_entropy(result.logits, targets, mask)
        else:
            task = T.cross_entropy(result.logits, targets)
        return task, task
