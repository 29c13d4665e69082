"""Set aggregation: mean-pool baseline and the learned attention aggregator.

The learned aggregator stacks L attention layers that deviate from standard
transformer blocks on purpose: query and key share one projection matrix
per layer, value projection is the identity, there is no feed-forward
sublayer, no skip connection, and no layer norm. The CLS token starts as
the mean of the inputs and is the only token the attention refines; the
final output is the CLS of the last layer, a convex combination of the
input tokens, so it lives in the same descriptor space as the database
vectors.

Two wiring modes exist:
  * repeat_inputs=True (default): every layer sees the ORIGINAL k tokens
    plus the previous layer's CLS, so only the CLS attention row is needed.
  * repeat_inputs=False (ablation): each layer consumes all k+1 outputs of
    the previous layer, which requires full attention in earlier layers.

Backward passes are exact analytic gradients (no autodiff dependency),
validated against central finite differences in the test suite.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .store import write_atomic

AGG_MAGIC = b"CLETAGG\0"
AGG_VERSION = 1


@dataclass
class AggregatorParams:
    """Learnable state: one square projection per layer plus the mixing logit.

    Projections may be any float dtype (gradient checks want float64);
    checkpoints store float32, and the training loop keeps values on the
    float32 grid so save -> load is a bitwise identity. All arithmetic
    upcasts to float64. lambda = sigmoid(lambda_logit) is the hybrid mixing
    weight, always in (0,1).
    """

    projections: np.ndarray     # (L, d_i, d_i)
    lambda_logit: float
    version_tag: int = AGG_VERSION

    @property
    def num_layers(self) -> int:
        return self.projections.shape[0]

    @property
    def d_i(self) -> int:
        return self.projections.shape[1]

    @property
    def mixing_weight(self) -> float:
        return float(sigmoid(self.lambda_logit))

    def copy(self) -> "AggregatorParams":
        return AggregatorParams(self.projections.copy(), self.lambda_logit, self.version_tag)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def mean_pool(tokens: np.ndarray) -> np.ndarray:
    """Arithmetic mean of k tokens; no renormalization."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValidationError("mean_pool needs at least one token")
    return tokens.mean(axis=0)


def init_params(d_i: int, num_layers: int, seed: int, noise_std: float | None = None) -> AggregatorParams:
    """Identity-plus-noise projections (std 0.01/sqrt(d_i)) and lambda = 0.5.

    The warm start attends by raw token similarity, i.e. close to mean pooling.
    """
    if d_i < 1 or num_layers < 1:
        raise ValidationError("d_i and num_layers must be >= 1")
    if noise_std is None:
        noise_std = 0.01 / np.sqrt(d_i)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((num_layers, d_i, d_i)) * noise_std
    proj = (np.eye(d_i)[None, :, :] + noise).astype(np.float32)
    return AggregatorParams(projections=proj, lambda_logit=0.0)


@dataclass
class ForwardCache:
    """Everything the backward pass needs: per-layer inputs, projections of
    them, attention weights, and mode flags."""

    tokens: np.ndarray              # (k, d) float64 original inputs
    repeat_inputs: bool
    temperature: float
    passthrough: bool               # k == 1 shortcut taken
    renormalized: bool
    layer_inputs: list[np.ndarray]  # per layer: (k+1, d) input tokens U
    layer_proj: list[np.ndarray]    # per layer: (k+1, d) P = U @ W.T
    layer_weights: list[np.ndarray]  # per layer: (k+1,) CLS row or (k+1, k+1) full


def attention_layer_forward(
    projection: np.ndarray,
    base_tokens: np.ndarray,
    cls_in: np.ndarray,
    temperature: float = 1.0,
) -> tuple[np.ndarray, dict]:
    """One CLS-row attention step. Logits are plain projected dot products
    (no 1/sqrt(d) scaling); values are the unprojected input tokens."""
    W = np.asarray(projection, dtype=np.float64)
    T = np.asarray(base_tokens, dtype=np.float64)
    c = np.asarray(cls_in, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] < 1:
        raise ValidationError("attention layer needs k >= 1 base tokens")
    if W.shape != (T.shape[1], T.shape[1]) or c.shape != (T.shape[1],):
        raise ValidationError("projection / token dimension mismatch")
    U = np.vstack([T, c[None, :]])
    P = U @ W.T
    z = (P @ P[-1]) / temperature
    z = z - z.max()
    w = np.exp(z)
    w /= w.sum()
    cls_out = w @ U
    return cls_out, {"U": U, "P": P, "weights": w}


def _full_attention_forward(W: np.ndarray, U: np.ndarray, temperature: float):
    P = U @ W.T
    Z = (P @ P.T) / temperature
    Z = Z - Z.max(axis=1, keepdims=True)
    Wgt = np.exp(Z)
    Wgt /= Wgt.sum(axis=1, keepdims=True)
    return Wgt @ U, {"U": U, "P": P, "weights": Wgt}


def aggregate_forward(
    params: AggregatorParams,
    tokens: np.ndarray,
    repeat_inputs: bool = True,
    temperature: float = 1.0,
    renormalize_output: bool = False,
) -> tuple[np.ndarray, ForwardCache]:
    """Run all L layers; returns the final CLS token (float64) and a cache.

    k = 1 bypasses the layers entirely and returns tokens[0] bitwise.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValidationError("aggregate_forward needs k >= 1 tokens")
    if tokens.shape[1] != params.d_i:
        raise ValidationError(
            f"token dim {tokens.shape[1]} does not match params d_i {params.d_i}"
        )
    k = tokens.shape[0]
    if k == 1:
        out = tokens[0].copy()
        cache = ForwardCache(tokens, repeat_inputs, temperature, True, False, [], [], [])
        return out, cache

    proj64 = params.projections.astype(np.float64)
    inputs, projs, weights = [], [], []
    if repeat_inputs:
        cls = tokens.mean(axis=0)
        for l in range(params.num_layers):
            cls, c = attention_layer_forward(proj64[l], tokens, cls, temperature)
            inputs.append(c["U"])
            projs.append(c["P"])
            weights.append(c["weights"])
        out = cls
    else:
        U = np.vstack([tokens, tokens.mean(axis=0)[None, :]])
        for l in range(params.num_layers):
            Unext, c = _full_attention_forward(proj64[l], U, temperature)
            inputs.append(c["U"])
            projs.append(c["P"])
            weights.append(c["weights"])
            U = Unext
        out = U[-1].copy()

    renorm = False
    if renormalize_output:
        n = np.linalg.norm(out)
        if n == 0.0:
            raise ValidationError("cannot renormalize a zero aggregate")
        out = out / n
        renorm = True
    cache = ForwardCache(tokens, repeat_inputs, temperature, False, renorm, inputs, projs, weights)
    return out, cache


def _cls_row_backward(W, U, P, w, tau, g):
    """Backward through one CLS-row layer. Returns (dW, dU)."""
    dw = U @ g                     # (k+1,)
    dU = np.outer(w, g)            # value path
    dz = w * (dw - w @ dw)
    dz = dz / tau
    dP = np.outer(dz, P[-1])
    dP[-1] += dz @ P
    dW = dP.T @ U
    dU += dP @ W
    return dW, dU


def _full_row_backward(W, U, P, Wgt, tau, G):
    """Backward through one full-attention layer. Returns (dW, dU)."""
    dS = G @ U.T                           # dL/d weights, (k+1, k+1)
    dU = Wgt.T @ G
    dZ = Wgt * (dS - (Wgt * dS).sum(axis=1, keepdims=True))
    dZ = dZ / tau
    dP = dZ @ P + dZ.T @ P
    dW = dP.T @ U
    dU += dP @ W
    return dW, dU


def aggregate_backward(
    params: AggregatorParams,
    cache: ForwardCache,
    grad_output: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of grad_output . output w.r.t. projections and tokens.

    Returns (grad_projections (L, d, d) float64, grad_tokens (k, d) float64).
    """
    g = np.asarray(grad_output, dtype=np.float64)
    k, d = cache.tokens.shape
    if g.shape != (d,):
        raise ValidationError("grad_output dimension mismatch")
    if cache.renormalized:
        raise ValidationError("backward through a renormalized output is unsupported")
    L = params.num_layers
    grad_proj = np.zeros((L, d, d), dtype=np.float64)
    if cache.passthrough:
        grad_tokens = np.zeros((k, d), dtype=np.float64)
        grad_tokens[0] = g
        return grad_proj, grad_tokens
    if len(cache.layer_inputs) != L:
        raise ValidationError("cache does not match params (layer count)")

    proj64 = params.projections.astype(np.float64)
    tau = cache.temperature
    grad_tokens = np.zeros((k, d), dtype=np.float64)

    if cache.repeat_inputs:
        g_cls = g
        for l in range(L - 1, -1, -1):
            dW, dU = _cls_row_backward(
                proj64[l], cache.layer_inputs[l], cache.layer_proj[l],
                cache.layer_weights[l], tau, g_cls,
            )
            grad_proj[l] = dW
            grad_tokens += dU[:k]
            g_cls = dU[k]
        grad_tokens += g_cls[None, :] / k   # cls_0 = mean of tokens
    else:
        G = np.zeros((k + 1, d), dtype=np.float64)
        G[-1] = g
        for l in range(L - 1, -1, -1):
            dW, dU = _full_row_backward(
                proj64[l], cache.layer_inputs[l], cache.layer_proj[l],
                cache.layer_weights[l], tau, G,
            )
            grad_proj[l] = dW
            G = dU
        grad_tokens = G[:k] + G[k][None, :] / k
    return grad_proj, grad_tokens


def save_params(params: AggregatorParams, path: str | Path) -> None:
    """Checkpoint: magic, u32 version, u32 d_i, u32 L, f64 lambda_logit,
    then L row-major d_i*d_i float32 matrices, little-endian."""
    head = struct.pack(
        "<8sIIId", AGG_MAGIC, AGG_VERSION, params.d_i, params.num_layers,
        float(params.lambda_logit),
    )
    body = params.projections.astype("<f4").tobytes()
    write_atomic(path, head + body)


def load_params(path: str | Path) -> AggregatorParams:
    data = Path(path).read_bytes()
    head = struct.Struct("<8sIIId")
    if len(data) < head.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, d_i, L, logit = head.unpack_from(data)
    if magic != AGG_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != AGG_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    body = data[head.size:]
    expect = L * d_i * d_i * 4
    if len(body) != expect:
        raise FormatError(f"{path}: truncated checkpoint body ({len(body)} of {expect} bytes)")
    proj = np.frombuffer(body, dtype="<f4").reshape(L, d_i, d_i).copy()
    return AggregatorParams(projections=proj, lambda_logit=logit)
