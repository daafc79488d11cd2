"""Distance-reweighted cross-view attention ``z = softmax(A * M) V``.

``A = Q K^T / sqrt(d)`` (the scaling can be switched off), ``M`` is the
weight matrix from :mod:`crossview.controls` and the product with ``A`` is
element-wise, applied before the row softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatch, Image


@dataclass(frozen=True, eq=False)
class PatchEncoder:
    """Linear patch embedding: flattened ``(p, p, C)`` patch -> ``d`` features."""

    patch_size: int
    weights: np.ndarray  # (p*p*C, d)
    bias: np.ndarray  # (d,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] < 1 or b.shape != (w.shape[1],):
            raise DimensionMismatch(f"encoder weights {w.shape} and bias {b.shape} disagree")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("encoder parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def embed_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def random(cls, patch_size: int, channels: int, d: int, rng: np.random.Generator):
        fan_in = patch_size * patch_size * channels
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, d))
        return cls(patch_size, w, np.zeros(d))


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray

    def __post_init__(self):
        for name in ("W_q", "W_k", "W_v"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.all(np.isfinite(m)):
                raise ValueError(f"{name} must be a finite square matrix")
            object.__setattr__(self, name, m)

    @classmethod
    def random(cls, d: int, rng: np.random.Generator) -> "ProjectionSet":
        s = 1.0 / np.sqrt(d)
        return cls(*(rng.normal(0.0, s, (d, d)) for _ in range(3)))


@dataclass(frozen=True, eq=False)
class AttentionInputs:
    Q: np.ndarray  # (n_p, d)
    K: np.ndarray  # (n_s, d)
    V: np.ndarray  # (n_s, d_v)
    M: np.ndarray  # (n_p, n_s)

    def __post_init__(self):
        Q, K, V, M = (np.asarray(a) for a in (self.Q, self.K, self.V, self.M))
        if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2 or M.ndim != 2:
            raise DimensionMismatch("Q, K, V and M must be matrices")
        if Q.shape[1] != K.shape[1]:
            raise DimensionMismatch(f"Q width {Q.shape[1]} != K width {K.shape[1]}")
        if K.shape[0] != V.shape[0]:
            raise DimensionMismatch(f"K has {K.shape[0]} tokens, V has {V.shape[0]}")
        if M.shape != (Q.shape[0], K.shape[0]):
            raise DimensionMismatch(f"M is {M.shape}, expected {(Q.shape[0], K.shape[0])}")

    def astype(self, dtype) -> "AttentionInputs":
        return AttentionInputs(*(np.asarray(a, dtype=dtype) for a in (self.Q, self.K, self.V, self.M)))


def encode(img: Image | np.ndarray, enc: PatchEncoder) -> np.ndarray:
    """Patch tokens of ``img``, row-major over patches, shape ``(H/p * W/p, d)``."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    H, W, C = px.shape
    p = enc.patch_size
    if H % p or W % p:
        raise DimensionMismatch(f"image {H}x{W} not divisible by patch size {p}")
    if enc.weights.shape[0] != p * p * C:
        raise DimensionMismatch(f"encoder expects {enc.weights.shape[0]} inputs, patches have {p * p * C}")
    patches = px.reshape(H // p, p, W // p, p, C).transpose(0, 2, 1, 3, 4).reshape(-1, p * p * C)
    return patches @ enc.weights + enc.bias


def project(tokens_pano: np.ndarray, tokens_sat: np.ndarray, proj: ProjectionSet):
    """``(Q, K, V)`` from panorama and satellite tokens."""
    return tokens_pano @ proj.W_q, tokens_sat @ proj.W_k, tokens_sat @ proj.W_v


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _scale(d: int, scaled: bool) -> float:
    return 1.0 / np.sqrt(d) if scaled else 1.0


def cross_view_attention(inputs: AttentionInputs, scaled: bool = True) -> np.ndarray:
    """Fused panorama feature ``z`` with shape ``(n_p, d_v)``.

    Runs in the dtype of ``inputs`` (float32 for production, float64 for
    verification).
    """
    Q, K, V, M = inputs.Q, inputs.K, inputs.V, inputs.M
    A = (Q @ K.T) * Q.dtype.type(_scale(Q.shape[1], scaled))
    P = softmax_rows(A * M)
    return P @ V


def to_panorama_feature(z: np.ndarray, control_dims: tuple[int, int]) -> np.ndarray:
    """Reshape ``z`` to ``(h_p, w_p, d)``."""
    h_p, w_p = control_dims
    if z.shape[0] != h_p * w_p:
        raise DimensionMismatch(f"{z.shape[0]} rows cannot form a {h_p}x{w_p} feature map")
    return z.reshape(h_p, w_p, -1)


def row_entropy(z_probs: np.ndarray) -> np.ndarray:
    p = np.clip(z_probs, 1e-300, 1.0)
    return -(z_probs * np.log(p)).sum(axis=1)


def attention_probs(inputs: AttentionInputs, scaled: bool = True) -> np.ndarray:
    Q, K, M = inputs.Q, inputs.K, inputs.M
    return softmax_rows((Q @ K.T) * _scale(Q.shape[1], scaled) * M)


def sum_squares_loss(z: np.ndarray) -> float:
    return float(np.sum(z * z))


def attention_grads(inputs: AttentionInputs, scaled: bool = True) -> dict[str, np.ndarray]:
    """Analytic gradients of ``sum(z**2)`` with respect to Q, K, V and M."""
    x = inputs.astype(np.float64)
    Q, K, V, M = x.Q, x.K, x.V, x.M
    s = _scale(Q.shape[1], scaled)
    A = (Q @ K.T) * s
    P = softmax_rows(A * M)
    z = P @ V
    dz = 2.0 * z
    dP = dz @ V.T
    dV = P.T @ dz
    dS = P * (dP - (dP * P).sum(axis=1, keepdims=True))
    dA = dS * M
    dM = dS * A
    dQ = s * dA @ K
    dK = s * dA.T @ Q
    return {"Q": dQ, "K": dK, "V": dV, "M": dM}


def finite_difference_grads(
    inputs: AttentionInputs, scaled: bool = True, step: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central differences of ``sum(z**2)``, one element at a time."""
    base = {k: np.array(getattr(inputs, k), dtype=np.float64) for k in ("Q", "K", "V", "M")}

    def loss(arrs):
        return sum_squares_loss(cross_view_attention(AttentionInputs(**arrs), scaled))

    out = {}
    for name, arr in base.items():
        g = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss(base)
            arr[idx] = orig - step
            down = loss(base)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out[name] = g
    return out


def attention_grad_check(
    inputs: AttentionInputs, scaled: bool = True, step: float = 1e-5
) -> tuple[float, dict[str, float]]:
    """Max elementwise relative error between analytic and finite-difference gradients.

    The relative error is ``|g_fd - g| / max(|g|, 1e-8)``.  Returns the overall
    maximum and the per-operand maxima.
    """
    analytic = attention_grads(inputs, scaled)
    numeric = finite_difference_grads(inputs, scaled, step)
    per = {}
    for k in analytic:
        denom = np.maximum(np.abs(analytic[k]), 1e-8)
        per[k] = float(np.max(np.abs(numeric[k] - analytic[k]) / denom))
    return max(per.values()), per
