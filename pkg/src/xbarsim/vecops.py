"""Elementwise vector unit semantics on Q8.8 values.

Every backend (instruction-level machine, functional graph evaluation,
reference trainer) calls these same functions, so nonlinearities stay
bit-identical across them. Inputs and outputs are int64 arrays holding
int16-range raw values.
"""

import numpy as np

from .errors import ValidationError
from .fixedpoint import Q8_8, rhe_shift

I16_MIN = -(1 << 15)
I16_MAX = (1 << 15) - 1


def _clamp16(v):
    return np.clip(v, I16_MIN, I16_MAX)


def vadd(a, b):
    return _clamp16(np.asarray(a, np.int64) + np.asarray(b, np.int64))


def vsub(a, b):
    return _clamp16(np.asarray(a, np.int64) - np.asarray(b, np.int64))


def vmul(a, b):
    # Q8.8 * Q8.8 -> Q16.16, rounded back to Q8.8
    prod = np.asarray(a, np.int64) * np.asarray(b, np.int64)
    return _clamp16(rhe_shift(prod, 8))


def vrelu(a, _b=None):
    return np.maximum(np.asarray(a, np.int64), 0)


def vrelu_grad(g, h):
    """Gradient gate: pass g where the pre-activation h was positive."""
    g = np.asarray(g, np.int64)
    return np.where(np.asarray(h, np.int64) > 0, g, 0)


def vsigmoid(a, _b=None):
    x = np.asarray(a, np.int64).astype(np.float64) / Q8_8.one
    s = 1.0 / (1.0 + np.exp(-x))
    return _clamp16(np.rint(s * Q8_8.one).astype(np.int64))


def vsigmoid_grad(g, y):
    """g * y * (1 - y) where y is the stored sigmoid output in Q8.8."""
    y = np.asarray(y, np.int64)
    f = rhe_shift(y * (Q8_8.one - y), 8)
    return _clamp16(rhe_shift(np.asarray(g, np.int64) * f, 8))


def vloss_grad(logits, onehot):
    """Softmax cross-entropy error signal: onehot - softmax(logits), in Q8.8.

    This is the negated loss gradient. The update path can only accumulate
    (the outer-product engine adds into the array), so the descent sign is
    folded in here and carried through the whole linear backward chain.
    The softmax runs in float64 and is quantized once, so every backend
    produces the same raw values for the same inputs.
    """
    z = np.asarray(logits, np.int64).astype(np.float64) / Q8_8.one
    z = z - z.max()
    e = np.exp(z)
    p = e / e.sum()
    q = np.rint(p * Q8_8.one).astype(np.int64)
    return _clamp16(np.asarray(onehot, np.int64) - q)


ALU_FUNCS = {
    "add": vadd,
    "sub": vsub,
    "mul": vmul,
    "relu": vrelu,
    "relu_grad": vrelu_grad,
    "sigmoid": vsigmoid,
    "sigmoid_grad": vsigmoid_grad,
    "loss_grad": vloss_grad,
}


def apply_alu(subop, a, b=None):
    try:
        fn = ALU_FUNCS[subop]
    except KeyError:
        raise ValidationError("unknown vector op %r" % subop)
    out = fn(a, b)
    return np.asarray(out, dtype=np.int64)


def softmax_probs(logits_raw):
    """Float softmax over Q8.8 logits, for loss curves and accuracy."""
    z = np.asarray(logits_raw, np.int64).astype(np.float64) / Q8_8.one
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()
