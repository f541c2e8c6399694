"""Self-attention correlation between regions, GCN propagation and the classifier."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEGREE_FLOOR = 1e-6


def init_attention(d, d_k, n_regions, rng) -> dict:
    def fc(n_in, n_out):
        return Tensor(rng.normal(0.0, np.sqrt(1.0 / n_in), (n_in, n_out)), requires_grad=True)

    return {
        "gcn.attn_q.weight": fc(d, d_k),
        "gcn.attn_q.bias": Tensor(np.zeros(d_k), requires_grad=True),
        "gcn.attn_k.weight": fc(d, d_k),
        "gcn.attn_k.bias": Tensor(np.zeros(d_k), requires_grad=True),
        "gcn.attn_v.weight": fc(d, n_regions),
        "gcn.attn_v.bias": Tensor(np.zeros(n_regions), requires_grad=True),
    }


def init_gcn(d, rng, noise=None) -> dict:
    # near-identity propagation at the start of training
    noise = np.sqrt(1.0 / d) * 0.1 if noise is None else noise
    return {
        f"gcn.theta{i}": Tensor(np.eye(d) + rng.normal(0.0, noise, (d, d)), requires_grad=True) for i in range(2)
    }


def init_classifier(n_regions, d, rng) -> dict:
    width = (n_regions + 1) * d
    return {
        "gcn.classifier.weight": Tensor(rng.normal(0.0, np.sqrt(1.0 / width), (width, 2)), requires_grad=True),
        "gcn.classifier.bias": Tensor(np.zeros(2), requires_grad=True),
    }


def _affine(x, w, b):
    out = T.matmul(x, w)
    return out + T.broadcast_to(b, out.shape)


def attention_scores(F_w, params) -> tuple:
    """Row-stochastic attention weights ``softmax(QKᵀ/√d_k)`` and the values ``V``."""
    F_w = T.as_tensor(F_w)
    B, N = F_w.shape[:2]
    X = T.reshape(F_w, (B, N, -1))
    Q = _affine(X, params["gcn.attn_q.weight"], params["gcn.attn_q.bias"])
    K = _affine(X, params["gcn.attn_k.weight"], params["gcn.attn_k.bias"])
    V = _affine(X, params["gcn.attn_v.weight"], params["gcn.attn_v.bias"])
    d_k = Q.shape[-1]
    logits = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / np.sqrt(d_k))
    return T.softmax(logits, axis=-1), V


def attention_correlation(F_w, params) -> Tensor:
    """Per-image ``N×N`` correlation matrix ``A = softmax(QKᵀ/√d_k)·V``."""
    weights, V = attention_scores(F_w, params)
    return T.matmul(weights, V)


def prepare_adjacency(A) -> Tensor:
    """Symmetrically normalised adjacency with self-loops.

    Negative correlations are clamped to zero and the directed matrix is
    symmetrised before adding the identity; degrees are floored at 1e-6.
    """
    A = T.as_tensor(A)
    squeeze = A.ndim == 2
    if squeeze:
        A = T.reshape(A, (1,) + A.shape)
    B, N, _ = A.shape
    pos = T.relu(A)
    sym = T.scale(pos + T.transpose(pos), 0.5)
    hat = sym + Tensor(np.broadcast_to(np.eye(N), (B, N, N)))
    deg = T.clamp_min(T.reduce_sum(hat, axis=-1), DEGREE_FLOOR)
    inv_sqrt = T.power(deg, -0.5)
    rows = T.broadcast_to(T.reshape(inv_sqrt, (B, N, 1)), (B, N, N))
    cols = T.broadcast_to(T.reshape(inv_sqrt, (B, 1, N)), (B, N, N))
    norm = hat * rows * cols
    return T.reshape(norm, (N, N)) if squeeze else norm


def gcn_layer(X, adj_norm, theta) -> Tensor:
    """``ReLU(Â_norm · X · Θ)`` for ``B×N×d`` node features."""
    return T.relu(T.matmul(T.matmul(adj_norm, X), theta))


def propagate(F_w, A, params, adj_norm=None) -> Tensor:
    """Two GCN layers sharing one normalised adjacency; output shaped like ``F_w``."""
    F_w = T.as_tensor(F_w)
    B, N = F_w.shape[:2]
    if adj_norm is None:
        adj_norm = prepare_adjacency(A)
    X = T.reshape(F_w, (B, N, -1))
    X = gcn_layer(X, adj_norm, params["gcn.theta0"])
    X = gcn_layer(X, adj_norm, params["gcn.theta1"])
    return T.reshape(X, F_w.shape)


def classifier_logits(F_c, F_nodes, params) -> Tensor:
    B = F_c.shape[0]
    joined = T.reshape(T.concat([F_c, F_nodes], axis=1), (B, -1))
    return _affine(joined, params["gcn.classifier.weight"], params["gcn.classifier.bias"])


def classify(F_c, F_p, params) -> Tensor:
    """Softmax over two classes from ``F_c ⊕ F_p``; column 1 is the private probability."""
    return T.softmax(classifier_logits(T.as_tensor(F_c), T.as_tensor(F_p), params), axis=-1)


def fixed_correlation(batch, n_regions) -> Tensor:
    return Tensor(np.ones((batch, n_regions, n_regions)))
