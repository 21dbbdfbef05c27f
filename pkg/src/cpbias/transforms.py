"""Logit transformations used for confidence calibration.

Six variants of increasing parameter count:

========================  ==========================================  ==========
variant                   action on a logit vector z                  parameters
========================  ==========================================  ==========
``Identity``              z                                           0
``TempScale``             z / temperature                             1
``ScalarAffineScale``     gain * z + offset                           2
``RankOneAffineScale``    gain * z + (mix . z + offset) * 1           K + 2
``VectorScale``           weight * z + bias  (elementwise)            2K
``MatrixScale``           weight @ z + bias                           K^2 + K
========================  ==========================================  ==========

``ScalarAffineScale`` and ``RankOneAffineScale`` are order-preserving by
construction: they never change the ranking of the logits.  A ``VectorScale``
is order-preserving exactly when all weights are equal and positive and all
biases are equal; a ``MatrixScale`` exactly when its weight matrix is a
positive multiple of the identity plus a rank-one all-ones tilt and its bias
is constant.  ``is_order_preserving`` checks these characterizations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Identity",
    "TempScale",
    "ScalarAffineScale",
    "RankOneAffineScale",
    "VectorScale",
    "MatrixScale",
    "Transform",
    "apply_transform",
    "is_order_preserving",
    "transform_to_json",
    "transform_from_json",
    "param_count",
]

_OP_TOL = 1e-10


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class TempScale:
    temperature: float

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class ScalarAffineScale:
    gain: float
    offset: float = 0.0

    def __post_init__(self):
        if not (self.gain > 0):
            raise ValueError(f"gain must be positive, got {self.gain}")


@dataclass(frozen=True)
class RankOneAffineScale:
    gain: float
    mix: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        if not (self.gain > 0):
            raise ValueError(f"gain must be positive, got {self.gain}")
        object.__setattr__(self, "mix", np.asarray(self.mix, dtype=np.float64))


@dataclass(frozen=True)
class VectorScale:
    weight: np.ndarray
    bias: np.ndarray
    freeze_mask: np.ndarray | None = None  # (K, 2) bools: column 0 weight, 1 bias

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.shape != b.shape or w.ndim != 1:
            raise ValueError("weight and bias must be vectors of equal length")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if self.freeze_mask is not None:
            m = np.asarray(self.freeze_mask, dtype=bool)
            if m.shape != (w.shape[0], 2):
                raise ValueError("freeze_mask must have shape (K, 2)")
            object.__setattr__(self, "freeze_mask", m)


@dataclass(frozen=True)
class MatrixScale:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or b.shape != (w.shape[0],):
            raise ValueError("weight must be (K, K) and bias (K,)")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


Transform = Identity | TempScale | ScalarAffineScale | RankOneAffineScale | VectorScale | MatrixScale


def _check_dim(t: Transform, K: int) -> None:
    if isinstance(t, RankOneAffineScale) and t.mix.shape != (K,):
        raise ValueError(f"transform expects {t.mix.shape[0]} classes, got {K}")
    if isinstance(t, VectorScale) and t.weight.shape != (K,):
        raise ValueError(f"transform expects {t.weight.shape[0]} classes, got {K}")
    if isinstance(t, MatrixScale) and t.weight.shape != (K, K):
        raise ValueError(f"transform expects {t.weight.shape[0]} classes, got {K}")


def apply_transform(t: Transform, logits: np.ndarray) -> np.ndarray:
    """Apply a transform to logits of shape (K,) or a batch (n, K)."""
    z = np.asarray(logits, dtype=np.float64)
    _check_dim(t, z.shape[-1])
    if isinstance(t, Identity):
        return z
    if isinstance(t, TempScale):
        return z / t.temperature
    if isinstance(t, ScalarAffineScale):
        return t.gain * z + t.offset
    if isinstance(t, RankOneAffineScale):
        return t.gain * z + (z @ t.mix + t.offset)[..., None]
    if isinstance(t, VectorScale):
        return t.weight * z + t.bias
    if isinstance(t, MatrixScale):
        return z @ t.weight.T + t.bias
    raise TypeError(f"unknown transform {t!r}")


def is_order_preserving(t: Transform) -> bool:
    """True iff the transform never reorders logit entries.

    ``Identity``, ``TempScale``, ``ScalarAffineScale`` and
    ``RankOneAffineScale`` qualify by construction.  A ``VectorScale``
    qualifies iff its weights are all equal and positive and its biases all
    equal; a ``MatrixScale`` iff weight = a*I + 1 mix^T with a > 0 and the
    bias constant (equality within 1e-10).
    """
    if isinstance(t, (Identity, TempScale, ScalarAffineScale, RankOneAffineScale)):
        return True
    if isinstance(t, VectorScale):
        w, b = t.weight, t.bias
        return (
            np.ptp(w) <= _OP_TOL
            and float(w[0]) > 0
            and np.ptp(b) <= _OP_TOL
        )
    if isinstance(t, MatrixScale):
        W, b = t.weight, t.bias
        K = W.shape[0]
        if np.ptp(b) > _OP_TOL:
            return False
        if K == 1:
            return float(W[0, 0]) > 0
        off_diag = W - np.diag(np.diag(W))
        mix = off_diag.sum(axis=0) / (K - 1)
        if np.abs(off_diag - (1 - np.eye(K)) * mix[None, :]).max() > _OP_TOL:
            return False
        gains = np.diag(W) - mix
        return np.ptp(gains) <= _OP_TOL and float(gains[0]) > _OP_TOL
    raise TypeError(f"unknown transform {t!r}")


def param_count(t: Transform) -> int:
    """Free-parameter count of the transform's family."""
    if isinstance(t, Identity):
        return 0
    if isinstance(t, TempScale):
        return 1
    if isinstance(t, ScalarAffineScale):
        return 2
    if isinstance(t, RankOneAffineScale):
        return t.mix.shape[0] + 2
    if isinstance(t, VectorScale):
        return 2 * t.weight.shape[0]
    if isinstance(t, MatrixScale):
        k = t.weight.shape[0]
        return k * k + k
    raise TypeError(f"unknown transform {t!r}")


def transform_to_json(t: Transform) -> str:
    """Serialize with a variant tag; floats round-trip at full precision."""
    if isinstance(t, Identity):
        payload = {"variant": "identity"}
    elif isinstance(t, TempScale):
        payload = {"variant": "temp_scale", "temperature": t.temperature}
    elif isinstance(t, ScalarAffineScale):
        payload = {"variant": "scalar_affine", "gain": t.gain, "offset": t.offset}
    elif isinstance(t, RankOneAffineScale):
        payload = {
            "variant": "rank_one_affine",
            "gain": t.gain,
            "mix": t.mix.tolist(),
            "offset": t.offset,
        }
    elif isinstance(t, VectorScale):
        payload = {"variant": "vector_scale", "weight": t.weight.tolist(), "bias": t.bias.tolist()}
        if t.freeze_mask is not None:
            payload["freeze_mask"] = t.freeze_mask.astype(int).tolist()
    elif isinstance(t, MatrixScale):
        payload = {"variant": "matrix_scale", "weight": t.weight.tolist(), "bias": t.bias.tolist()}
    else:
        raise TypeError(f"unknown transform {t!r}")
    return json.dumps(payload)


def transform_from_json(text: str) -> Transform:
    payload = json.loads(text)
    variant = payload.get("variant")
    if variant == "identity":
        return Identity()
    if variant == "temp_scale":
        return TempScale(payload["temperature"])
    if variant == "scalar_affine":
        return ScalarAffineScale(payload["gain"], payload["offset"])
    if variant == "rank_one_affine":
        return RankOneAffineScale(payload["gain"], np.array(payload["mix"]), payload["offset"])
    if variant == "vector_scale":
        mask = payload.get("freeze_mask")
        return VectorScale(
            np.array(payload["weight"]),
            np.array(payload["bias"]),
            None if mask is None else np.array(mask, dtype=bool),
        )
    if variant == "matrix_scale":
        return MatrixScale(np.array(payload["weight"]), np.array(payload["bias"]))
    raise ValueError(f"unknown transform variant {variant!r}")
