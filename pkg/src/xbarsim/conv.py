"""Convolution lowerings onto the crossbar matrix primitives.

A conv layer's trainable matrix holds linearized filters: one column per
output channel, row index c*k*k + u*k + v over (input channel, kernel row,
kernel col). All three training convolutions then run as iterations of the
dense primitives, one output pixel per step:

  forward      MVM of the gathered input patch          -> h[:, e, f]
  backward     MTVM of the error pixel, scatter-added   -> dx patch
  weight grad  OPA(patch, error pixel)                  -> in-place update

Geometry is square, stride 1, zero padding, as encoded in LayerSpec. Flat
vectors are depth major: index ch*hw*hw + row*hw + col.
"""

import numpy as np

from .errors import ShapeError, UnsupportedConvError


def _conv_dims(layer, mat=None):
    if getattr(layer, "kind", None) != "conv":
        raise UnsupportedConvError("expected a conv layer, got %r" % (layer,))
    c, k, p = layer.in_ch, layer.k, layer.pad
    h, e, m = layer.in_hw, layer.out_hw, layer.out_ch
    if mat is not None and (mat.rows, mat.cols) != (c * k * k, m):
        raise ShapeError("matrix is %dx%d, layer needs %dx%d"
                         % (mat.rows, mat.cols, c * k * k, m))
    return c, h, k, p, e, m


def _padded(layer, x):
    c, h, _, p, _, _ = _conv_dims(layer)
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (c * h * h,):
        raise ShapeError("input length %d, layer needs %d"
                         % (x.size, c * h * h))
    xpad = np.zeros((c, h + 2 * p, h + 2 * p), dtype=np.int64)
    xpad[:, p:p + h, p:p + h] = x.reshape(c, h, h)
    return xpad


def input_patch(layer, x, e, f):
    """Gathered row operand for output pixel (e, f): the k*k window of every
    input channel, linearized to match the stored filter rows."""
    _, _, k, _, out_hw, _ = _conv_dims(layer)
    if not (0 <= e < out_hw and 0 <= f < out_hw):
        raise ShapeError("pixel (%d, %d) outside %dx%d map"
                         % (e, f, out_hw, out_hw))
    xpad = _padded(layer, x)
    return xpad[:, e:e + k, f:f + k].reshape(-1).copy()


def conv_forward(mat, layer, x, **mvm_kwargs):
    """Pre-activation feature maps, flat depth-major, one MVM per pixel."""
    c, h, k, p, e_hw, m = _conv_dims(layer, mat)
    xpad = _padded(layer, x)
    out = np.zeros((m, e_hw, e_hw), dtype=np.int64)
    for e in range(e_hw):
        for f in range(e_hw):
            patch = xpad[:, e:e + k, f:f + k].reshape(-1)
            out[:, e, f] = mat.mvm(patch, **mvm_kwargs)
    return out.reshape(-1)


def conv_backward(mat, layer, dh, **mtvm_kwargs):
    """Input-gradient maps, flat depth-major.

    Each error pixel's MTVM lands on the same window its forward patch was
    gathered from, so the scatter-add over all pixels realizes the
    correlation with vertically and horizontally flipped filters.
    """
    c, h, k, p, e_hw, m = _conv_dims(layer, mat)
    dh = np.asarray(dh, dtype=np.int64)
    if dh.shape != (m * e_hw * e_hw,):
        raise ShapeError("error length %d, layer needs %d"
                         % (dh.size, m * e_hw * e_hw))
    dh3 = dh.reshape(m, e_hw, e_hw)
    dxpad = np.zeros((c, h + 2 * p, h + 2 * p), dtype=np.int64)
    for e in range(e_hw):
        for f in range(e_hw):
            v = mat.mtvm(dh3[:, e, f], **mtvm_kwargs)
            dxpad[:, e:e + k, f:f + k] += v.reshape(c, k, k)
    return dxpad[:, p:p + h, p:p + h].reshape(-1)


def conv_wgrad(mat, layer, x, dh, lr_shift=0):
    """Accumulate the weight-gradient convolution in place.

    Strides over the output map once: each step drives one error pixel on
    the columns (depth major) and its matching input patch on the rows as a
    single OPA. Returns the step count, always out_hw**2 regardless of
    operand content.
    """
    c, h, k, p, e_hw, m = _conv_dims(layer, mat)
    dh = np.asarray(dh, dtype=np.int64)
    if dh.shape != (m * e_hw * e_hw,):
        raise ShapeError("error length %d, layer needs %d"
                         % (dh.size, m * e_hw * e_hw))
    xpad = _padded(layer, x)
    dh3 = dh.reshape(m, e_hw, e_hw)
    steps = 0
    for e in range(e_hw):
        for f in range(e_hw):
            patch = xpad[:, e:e + k, f:f + k].reshape(-1)
            mat.opa(patch, dh3[:, e, f], lr_shift=lr_shift)
            steps += 1
    return steps
