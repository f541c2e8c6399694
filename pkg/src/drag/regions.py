"""Region discovery: channel peak signatures, the channel grouping layer (CGL),
region-aware feature maps and the losses that shape them."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import netpbm
from . import tensor as T
from .errors import DimensionError, FormatError
from .kmeans import assignment_matrix, kmeans_cluster
from .tensor import Tensor

EPS = 1e-12


# -- peak signatures ---------------------------------------------------------


def peak_coordinates(F_b_single) -> list:
    """Row-major-first location ``(t_x, t_y)`` of each channel's maximum."""
    data = F_b_single.data if isinstance(F_b_single, Tensor) else np.asarray(F_b_single)
    if data.ndim != 3:
        raise DimensionError(f"expected C×H×W, got {data.shape}")
    return [tuple(int(v) for v in p) for p in batch_peaks(data[None])[0]]


def batch_peaks(F_b) -> np.ndarray:
    """``B×C×H×W`` -> ``B×C×2`` integer peak coordinates."""
    F_b = np.asarray(F_b)
    B, C, H, W = F_b.shape
    flat = np.argmax(F_b.reshape(B, C, H * W), axis=2)
    return np.stack(np.divmod(flat, W), axis=-1)


def build_channel_signatures(feature_maps) -> np.ndarray:
    """Concatenate per-image peak coordinates into one ``2Ω`` vector per channel.

    ``feature_maps`` is an iterable of ``C×H×W`` maps or of ``B×C×H×W``
    batches, consumed in dataset order. Returns a ``C×2Ω`` int array.
    """
    parts, shape = [], None
    for fm in feature_maps:
        arr = fm.data if isinstance(fm, Tensor) else np.asarray(fm)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise DimensionError(f"expected C×H×W maps, got {arr.shape}")
        if shape is None:
            shape = arr.shape[1:]
        elif arr.shape[1:] != shape:
            raise DimensionError(f"inconsistent feature map shape {arr.shape[1:]} after {shape}")
        parts.append(batch_peaks(arr))
    if not parts:
        raise DimensionError("no feature maps supplied")
    peaks = np.concatenate(parts)  # Ω×C×2
    return peaks.transpose(1, 0, 2).reshape(peaks.shape[1], -1)


def cluster_channels(signatures, n_regions, seed=0) -> np.ndarray:
    """Hard ``N×C`` channel-to-region assignment from K-means on signatures."""
    return kmeans_cluster(signatures, n_regions, seed=seed).assignment()


# -- channel grouping layer --------------------------------------------------


def init_cgl(channels, n_regions, hidden, rng) -> dict:
    return {
        "cgl.fc1.weight": Tensor(rng.normal(0.0, np.sqrt(2.0 / channels), (channels, hidden)), requires_grad=True),
        "cgl.fc1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        "cgl.fc2.weight": Tensor(
            rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, n_regions * channels)), requires_grad=True
        ),
        "cgl.fc2.bias": Tensor(np.zeros(n_regions * channels), requires_grad=True),
    }


def cgl_forward(F_b, params) -> Tensor:
    """Soft assignment ``cr′`` of shape ``B×N×C``, every entry in (0, 1).

    Each channel is summarised by its global max response; a hidden ReLU
    layer and an output affine map produce ``N·C`` logits.
    """
    F_b = T.as_tensor(F_b)
    B, C = F_b.shape[:2]
    w1, b1 = params["cgl.fc1.weight"], params["cgl.fc1.bias"]
    w2, b2 = params["cgl.fc2.weight"], params["cgl.fc2.bias"]
    desc, _ = T.max_with_argmax(T.reshape(F_b, (B, C, -1)), axis=2)
    h = T.relu(T.matmul(desc, w1) + T.broadcast_to(b1, (B, w1.shape[1])))
    logits = T.matmul(h, w2) + T.broadcast_to(b2, (B, w2.shape[1]))
    n = w2.shape[1] // C
    return T.reshape(T.sigmoid(logits), (B, n, C))


def region_features(F_b, cr_prime) -> Tensor:
    """``F_w[b, i] = (1/C) Σ_c F_b[b, c] · cr′[b, i, c]`` as a ``B×N×H×W`` stack."""
    F_b, cr_prime = T.as_tensor(F_b), T.as_tensor(cr_prime)
    B, C, H, W = F_b.shape
    if cr_prime.ndim == 2:
        cr_prime = T.broadcast_to(cr_prime, (B,) + cr_prime.shape)
    if cr_prime.shape[0] != B or cr_prime.shape[2] != C:
        raise DimensionError(f"cr′ {cr_prime.shape} does not match F_b {F_b.shape}")
    N = cr_prime.shape[1]
    stacked = T.matmul(cr_prime, T.reshape(F_b, (B, C, H * W)))
    return T.reshape(T.scale(stacked, 1.0 / C), (B, N, H, W))


# -- losses --------------------------------------------------------------------


def _zero_like_loss(x):
    return T.scale(T.reduce_sum(x), 0.0)


def dis_loss(F_w) -> Tensor:
    """Compactness: squared activations weighted by squared distance to the region peak.

    Peak locations are recomputed from the current maps and carry no gradient.
    """
    F_w = T.as_tensor(F_w)
    B, N, H, W = F_w.shape
    peaks = T.select(lambda: np.argmax(F_w.data.reshape(B, N, H * W), axis=2))
    tx, ty = np.divmod(peaks, W)
    xs = np.arange(H)[:, None]
    ys = np.arange(W)[None, :]
    weight = (xs - tx[..., None, None]) ** 2 + (ys - ty[..., None, None]) ** 2
    total = T.reduce_sum(T.square(F_w) * Tensor(weight.astype(np.float64)))
    return T.scale(total, 1.0 / B)


def _other_argmax(data):
    """Index of ``max_{j≠i}`` along axis 1, first index on ties."""
    top1 = np.argmax(data, axis=1)
    masked = data.copy()
    np.put_along_axis(masked, top1[:, None], -np.inf, axis=1)
    top2 = np.argmax(masked, axis=1)
    regions = np.arange(data.shape[1]).reshape(1, -1, *([1] * (data.ndim - 2)))
    return np.where(regions == top1[:, None], top2[:, None], top1[:, None])


def div_loss(F_w) -> Tensor:
    """Diversity: squared activations weighted by (strongest competing region − mean)².

    The competitor maximum routes its gradient through the selected region
    only; the margin is the per-image mean of ``F_w``.
    """
    F_w = T.as_tensor(F_w)
    B, N = F_w.shape[:2]
    if N == 1:
        return _zero_like_loss(F_w)
    mrg = T.broadcast_to(T.reduce_mean(F_w, axis=(1, 2, 3), keepdims=True), F_w.shape)
    idx = T.select(lambda: _other_argmax(F_w.data))
    rival = T.gather(F_w, idx, axis=1)
    total = T.reduce_sum(T.square(F_w) * T.square(rival - mrg))
    return T.scale(total, 1.0 / B)


def cgl_pretrain_loss(cr_prime, cr) -> Tensor:
    """Binary cross-entropy between ``cr′`` and the hard K-means assignment, batch-mean."""
    cr_prime = T.as_tensor(cr_prime)
    B = cr_prime.shape[0]
    target = np.broadcast_to(np.asarray(cr, dtype=np.float64), cr_prime.shape)
    pos = Tensor(target) * T.log(cr_prime + EPS)
    neg = Tensor(1.0 - target) * T.log((1.0 + EPS) - cr_prime)
    return T.scale(T.reduce_sum(pos + neg), -1.0 / B)


# -- text / image dumps ------------------------------------------------------


def write_signatures(path, signatures, H, W):
    sig = np.asarray(signatures, dtype=np.int64)
    C, twice_omega = sig.shape
    lines = [f"{C} {twice_omega // 2} {H} {W}"]
    lines += [" ".join(str(v) for v in row) for row in sig]
    Path(path).write_text("\n".join(lines) + "\n")


def read_signatures(path):
    lines = Path(path).read_text().splitlines()
    try:
        C, omega, H, W = (int(v) for v in lines[0].split())
        sig = np.array([[int(v) for v in ln.split()] for ln in lines[1 : C + 1]], dtype=np.int64)
    except (ValueError, IndexError) as e:
        raise FormatError(f"{path}: malformed signature file ({e})") from None
    if sig.shape != (C, 2 * omega):
        raise FormatError(f"{path}: expected {C}×{2 * omega} signature table, got {sig.shape}")
    return sig, (H, W)


def write_assignment(path, cr):
    cr = np.asarray(cr)
    Path(path).write_text("\n".join(" ".join(str(int(v)) for v in row) for row in cr) + "\n")


def read_assignment(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        try:
            rows.append([int(v) for v in line.split()])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer entry") from None
    cr = np.array(rows, dtype=np.float64)
    if cr.ndim != 2 or not np.isin(cr, (0.0, 1.0)).all() or not np.all(cr.sum(0) == 1):
        raise FormatError(f"{path}: not a hard assignment matrix")
    return cr


def normalize_to_bytes(region_map) -> np.ndarray:
    m = np.asarray(region_map, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_region_maps(F_w_single, image_id, out_dir) -> list:
    """Write one min-max normalised ``region_<image>_<i>.pgm`` per region map."""
    data = F_w_single.data if isinstance(F_w_single, Tensor) else np.asarray(F_w_single)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, rmap in enumerate(data):
        p = out_dir / f"region_{image_id}_{i}.pgm"
        netpbm.write(p, normalize_to_bytes(rmap))
        paths.append(p)
    return paths


__all__ = [
    "assignment_matrix",
    "batch_peaks",
    "build_channel_signatures",
    "cgl_forward",
    "cgl_pretrain_loss",
    "cluster_channels",
    "dis_loss",
    "div_loss",
    "export_region_maps",
    "init_cgl",
    "peak_coordinates",
    "region_features",
]
