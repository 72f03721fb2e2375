"""TransJect: injective, Lipschitz-bounded sequence encoder.

Layer-0 tokens are ``concat(orthonormal embedding, sinusoidal position)``.
Every sublayer is ``ORF o MOE o IR``: each expert applies the non-normalized
orthogonal attention ``X U diag(sigma) V`` followed by ELU inside a residual
scaled by ``sigmoid(alpha_hat) / L``; a per-sample softmax gate mixes the
experts; an orthogonal residual feed-forward block follows. The spectrum
``sigma`` is computed once per forward pass from the layer-0 gram matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .ortho import OrthogonalParam, SemiOrthogonalParam
from .spectral import PreconditionError, approx_eigen, gram, random_sigma, standardize
from .tensor import Tensor

TASKS = ("classification", "lm")
SIGMA_MODES = ("approx", "random")
POOLINGS = ("mean", "max")


class VocabularyError(IndexError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class TransJectConfig:
    layers: int = 4
    d: int = 64
    experts: int = 2
    vocab_size: int = 32
    max_len: int = 128
    sigma_mode: str = "approx"
    recon_weight: float = 0.1
    task: str = "classification"
    n_classes: int = 10
    pooling: str = "mean"
    tie_residuals: bool = False
    residual_init: float = -6.0
    seed: int = 0

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.layers < 3:
            warnings.warn(f"layers={self.layers} < 3: residual injectivity is not guaranteed",
                          stacklevel=2)
        if self.d < 2 or self.d % 2:
            raise ValueError(f"hidden size d must be even, got {self.d}")
        if self.experts < 1:
            raise ValueError("experts must be >= 1")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.recon_weight < 0:
            raise ValueError("recon_weight must be >= 0")


def sinusoidal_table(max_len: int, width: int) -> np.ndarray:
    """PE[p, 2i] = sin(p / 10000^(2i/width)), PE[p, 2i+1] = cos(same)."""
    pos = np.arange(max_len)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- building blocks ------------------------------------------------------------

def _as_rows(sigma: Tensor, x: Tensor) -> Tensor:
    """Broadcast a (d,) or (B, d) spectrum against (N, d) / (B, N, d) tokens."""
    if sigma.ndim == 1:
        return sigma
    return T.reshape(sigma, (sigma.shape[0], 1, sigma.shape[1]))


def orthogonal_attention(x: Tensor, u: Tensor, v: Tensor, sigma: Tensor) -> Tensor:
    """X U diag(sigma) V with orthogonal U, V."""
    return T.matmul(T.mul(T.matmul(x, u), _as_rows(sigma, x)), v)


def residual_weight(alpha_raw: Tensor) -> Tensor:
    return T.sigmoid(alpha_raw)


def expert_branch(x: Tensor, u: Tensor, v: Tensor, sigma: Tensor, alpha_raw: Tensor,
                  layers: int) -> Tensor:
    """x + (alpha / L) * ELU(orthogonal_attention(x))."""
    f = T.elu(orthogonal_attention(x, u, v, sigma))
    return T.add(x, T.mul(T.scale(residual_weight(alpha_raw), 1.0 / layers), f))


def gate(x: Tensor, gate_w: Tensor, mask=None) -> Tensor:
    """Per-sample expert weights softmax(mean_pool(x) W_gate)."""
    if x.ndim == 2:
        pooled = T.mean(x, axis=0, keepdims=True)
        return T.reshape(T.softmax(T.matmul(pooled, gate_w)), (gate_w.shape[1],))
    return T.softmax(T.matmul(T.mean_pool(x, mask), gate_w), axis=-1)


def moe_combine(branches: list[Tensor], lam: Tensor, tol: float = 1e-9) -> Tensor:
    """Convex combination sum_e lam_e * branch_e (lam is (E,) or (B, E))."""
    lam_np = lam.data
    if (lam_np < -tol).any() or np.abs(lam_np.sum(axis=-1) - 1.0).max() > tol:
        raise PreconditionError("expert weights are not a convex combination")
    if len(branches) != lam.shape[-1]:
        raise PreconditionError(f"{len(branches)} branches but {lam.shape[-1]} weights")
    out = None
    for e, b in enumerate(branches):
        w = T.slice_last(lam, e, e + 1)
        if lam.ndim == 2:
            w = T.reshape(w, (lam.shape[0], 1, 1))
        term = T.mul(w, b)
        out = term if out is None else T.add(out, term)
    return out


def orf(x: Tensor, w1: Tensor, w2: Tensor, b1: Tensor, b2: Tensor, alpha_raw: Tensor,
        layers: int) -> Tensor:
    """x + (alpha / L) * ELU(ELU(x W1 + b1) W2 + b2)."""
    inner = T.elu(T.add(T.matmul(x, w1), b1))
    f = T.elu(T.add(T.matmul(inner, w2), b2))
    return T.add(x, T.mul(T.scale(residual_weight(alpha_raw), 1.0 / layers), f))


# -- parameter containers ------------------------------------------------------

@dataclass
class LayerParams:
    u: list[OrthogonalParam]
    v: list[OrthogonalParam]
    residual_raw: Tensor
    gate_w: Tensor
    w1: OrthogonalParam
    w2: OrthogonalParam
    b1: Tensor
    b2: Tensor
    ffn_residual_raw: Tensor

    @property
    def alpha(self) -> float:
        return float(T._sigmoid(np.atleast_1d(self.residual_raw.data))[0])

    @property
    def ffn_alpha(self) -> float:
        return float(T._sigmoid(np.atleast_1d(self.ffn_residual_raw.data))[0])


class ForwardResult(NamedTuple):
    trace: list[Tensor]
    logits: Tensor
    gates: list[Tensor] | None
    recon: Tensor | None
    sigma: Tensor | None


class TransJect:
    kind = "transject"

    def __init__(self, config: TransJectConfig):
        self.config = cfg = config
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        d, half = cfg.d, cfg.d // 2
        ortho_scale = 1.0 / np.sqrt(d)
        self.embed = SemiOrthogonalParam(cfg.vocab_size, half, rng, name="embed")
        self.pe_table = sinusoidal_table(cfg.max_len, half)
        self.u_basis = OrthogonalParam(d, rng, ortho_scale, name="spectral.u_basis")
        self.sigma_raw = Tensor(random_sigma(d, cfg.seed + 1), requires_grad=True,
                                name="spectral.random_sigma")
        self.layers: list[LayerParams] = []
        for l in range(cfg.layers):
            p = f"layers.{l}"
            res = Tensor(cfg.residual_init, requires_grad=True, name=f"{p}.residual")
            ffn_res = res if cfg.tie_residuals else Tensor(
                cfg.residual_init, requires_grad=True, name=f"{p}.ffn.residual")
            self.layers.append(LayerParams(
                u=[OrthogonalParam(d, rng, ortho_scale, name=f"{p}.expert.{e}.u")
                   for e in range(cfg.experts)],
                v=[OrthogonalParam(d, rng, ortho_scale, name=f"{p}.expert.{e}.v")
                   for e in range(cfg.experts)],
                residual_raw=res,
                gate_w=Tensor(np.zeros((d, cfg.experts)), requires_grad=True, name=f"{p}.gate"),
                w1=OrthogonalParam(d, rng, ortho_scale, name=f"{p}.ffn.w1"),
                w2=OrthogonalParam(d, rng, ortho_scale, name=f"{p}.ffn.w2"),
                b1=Tensor(np.zeros(d), requires_grad=True, name=f"{p}.ffn.b1"),
                b2=Tensor(np.zeros(d), requires_grad=True, name=f"{p}.ffn.b2"),
                ffn_residual_raw=ffn_res,
            ))
        out = cfg.n_classes if cfg.task == "classification" else cfg.vocab_size
        self.head_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, out)), requires_grad=True,
                             name="head.w")
        self.head_b = Tensor(np.zeros(out), requires_grad=True, name="head.b")
        self.spectral_evaluations = 0

    # -- parameter bookkeeping ------------------------------------------------
    def orthogonal_params(self) -> dict[str, OrthogonalParam]:
        out: dict[str, OrthogonalParam] = {"embed": self.embed}
        if self.config.sigma_mode == "approx":
            out["spectral.u_basis"] = self.u_basis
        for l, lp in enumerate(self.layers):
            for e in range(self.config.experts):
                out[f"layers.{l}.expert.{e}.u"] = lp.u[e]
                out[f"layers.{l}.expert.{e}.v"] = lp.v[e]
            out[f"layers.{l}.ffn.w1"] = lp.w1
            out[f"layers.{l}.ffn.w2"] = lp.w2
        return out

    def parameters(self) -> dict[str, Tensor]:
        """Every trainable raw tensor by name, in a stable order."""
        params: dict[str, Tensor] = {"embed": self.embed.raw}
        if self.config.sigma_mode == "approx":
            params["spectral.u_basis"] = self.u_basis.raw
        else:
            params["spectral.random_sigma"] = self.sigma_raw
        for l, lp in enumerate(self.layers):
            p = f"layers.{l}"
            for e in range(self.config.experts):
                params[f"{p}.expert.{e}.u"] = lp.u[e].raw
                params[f"{p}.expert.{e}.v"] = lp.v[e].raw
            params[f"{p}.residual"] = lp.residual_raw
            params[f"{p}.gate"] = lp.gate_w
            params[f"{p}.ffn.w1"] = lp.w1.raw
            params[f"{p}.ffn.w2"] = lp.w2.raw
            params[f"{p}.ffn.b1"] = lp.b1
            params[f"{p}.ffn.b2"] = lp.b2
            if not self.config.tie_residuals:
                params[f"{p}.ffn.residual"] = lp.ffn_residual_raw
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def residual_weights(self) -> list[float]:
        return [lp.alpha for lp in self.layers]

    def ffn_residual_weights(self) -> list[float]:
        return [lp.ffn_alpha for lp in self.layers]

    # -- forward pieces ---------------------------------------------------------
    def embed_tokens(self, tokens) -> Tensor:
        """Rows concat(Emb(token_i), PE_i) for (N,) or (B, N) token ids."""
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[-1]
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabularyError(f"token id out of range [0, {self.config.vocab_size})")
        if n > self.config.max_len:
            raise LengthError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        emb = T.take_rows(self.embed.value(), tokens)
        pe = np.broadcast_to(self.pe_table[:n], emb.shape)
        return T.concat([emb, Tensor(pe)], axis=-1)

    def spectrum(self, x0: Tensor, mask=None) -> tuple[Tensor, Tensor | None]:
        """Standardized sigma per sample and the mean reconstruction loss."""
        self.spectral_evaluations += 1
        if self.config.sigma_mode == "random":
            return standardize(self.sigma_raw), None
        if mask is not None:
            x0 = T.mul(x0, Tensor(np.asarray(mask, dtype=np.float64)[..., None]))
        g = gram(x0)
        q = self.u_basis.value()
        sigma_raw, _ = approx_eigen(g, q)
        # reconstruction only trains the basis: the gram enters as a constant
        _, recon = approx_eigen(g.detach(), q)
        return standardize(sigma_raw), T.mean(recon)

    def sublayer(self, x: Tensor, lp: LayerParams, sigma: Tensor, mask=None,
                 weights: dict | None = None) -> tuple[Tensor, Tensor]:
        L = self.config.layers
        us = weights["u"] if weights else [p.value() for p in lp.u]
        vs = weights["v"] if weights else [p.value() for p in lp.v]
        w1 = weights["w1"] if weights else lp.w1.value()
        w2 = weights["w2"] if weights else lp.w2.value()
        branches = [expert_branch(x, us[e], vs[e], sigma, lp.residual_raw, L)
                    for e in range(len(us))]
        lam = gate(x, lp.gate_w, mask)
        mixed = moe_combine(branches, lam)
        return orf(mixed, w1, w2, lp.b1, lp.b2, lp.ffn_residual_raw, L), lam

    def encode(self, tokens, mask=None) -> tuple[list[Tensor], list[Tensor], Tensor, Tensor | None]:
        """Layer trace X^(0..L), gate weights per layer, sigma, recon loss."""
        return self.encode_embeddings(self.embed_tokens(tokens), mask)

    def encode_embeddings(self, x: Tensor, mask=None):
        """``encode`` starting from arbitrary layer-0 rows instead of token ids."""
        sigma, recon = self.spectrum(x, mask)
        trace, gates = [x], []
        for lp in self.layers:
            x, lam = self.sublayer(x, lp, sigma, mask)
            trace.append(x)
            gates.append(lam)
        return trace, gates, sigma, recon

    def head(self, xl: Tensor, mask=None) -> Tensor:
        if self.config.task == "lm":
            return T.add(T.matmul(xl, self.head_w), self.head_b)
        pooled = T.max_pool(xl, mask) if self.config.pooling == "max" else T.mean_pool(xl, mask)
        return T.add(T.matmul(pooled, self.head_w), self.head_b)

    def forward(self, tokens, mask=None, rng: np.random.Generator | None = None) -> ForwardResult:
        if mask is None:
            mask = np.ones(np.shape(tokens))
        trace, gates, sigma, recon = self.encode(tokens, mask)
        return ForwardResult(trace, self.head(trace[-1], mask), gates, recon, sigma)

    def loss(self, result: ForwardResult, targets, mask=None) -> tuple[Tensor, Tensor]:
        """(total loss, task loss); total adds recon_weight * recon in approx mode."""
        if self.config.task == "lm":
            task = T.cross_entropy(result.logits, targets, mask)
        else:
            task = T.cross_entropy(result.logits, targets)
        if result.recon is not None and self.config.recon_weight > 0:
            return T.add(task, T.scale(result.recon, self.config.recon_weight)), task
        return task, task
