"""Finite-difference checks of every layer kind, shared by unit and acceptance tests."""

import numpy as np

from dcednet import layers as L
from dcednet.tensor import finite_difference_grad, make_rng

ABS_TOL = 1e-3
REL_TOL = 1e-3


def _conv(rng, c_in=2, c_out=3):
    return L.ConvParams(rng.standard_normal((c_out, c_in, 3, 3)), rng.standard_normal(c_out))


def _bn(rng, c=2):
    p = L.BatchNormParams.create(c, np.float64)
    p.gamma[...] = rng.uniform(0.5, 1.5, c)
    p.beta[...] = rng.standard_normal(c)
    return p


def make_case(kind, seed):
    """Returns ``(forward(x, params) -> out, x, params dict)`` for one layer kind."""
    rng = make_rng(seed)
    x = rng.standard_normal((1, 2, 6, 6))
    if kind == "conv":
        p = _conv(rng)
        return (lambda x, p: L.conv2d(x, p)), x, p
    if kind == "tconv":
        p = _conv(rng)
        return (lambda x, p: L.transpose_conv2d(x, p)), x, p
    if kind == "batchnorm":
        p = _bn(rng)
        return (lambda x, p: L.batchnorm(x, p, "training")), x, p
    if kind in ("pool-average", "pool-max"):
        mode = kind.split("-")[1]
        return (lambda x, p: L.pool2x2(x, mode)), x, None
    if kind == "dropout":
        mask_seed = seed + 10_000
        spec = L.DropoutSpec(0.3, True)
        return (lambda x, p: L.dropout(x, spec, make_rng(mask_seed))), x, None
    if kind == "relu":
        # keep clear of the kink so central differences are exact
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        return (lambda x, p: L.relu(x)), x, None
    if kind == "sigmoid":
        return (lambda x, p: L.sigmoid(x)), x, None
    raise ValueError(kind)


CHECK_KINDS = ("conv", "tconv", "batchnorm", "pool-average", "pool-max", "dropout", "relu", "sigmoid")


def _within(analytic, numeric):
    err = np.abs(analytic - numeric)
    return bool(np.all(err <= np.maximum(ABS_TOL, REL_TOL * np.abs(numeric)))), float(err.max())


def check_layer(kind, seed):
    """Compare analytic and 64-bit central-difference gradients; returns (ok, max error)."""
    forward, x, params = make_case(kind, seed)
    out, cache = forward(x, params)
    r = make_rng(seed + 1).standard_normal(out.shape)   # random projection of the output
    layer_kind = kind.split("-")[0]
    g_in, pg = L.layer_backward(layer_kind, cache, r)

    def loss_x(xv):
        return float(np.sum(forward(xv, params)[0] * r))

    ok, worst = _within(g_in, finite_difference_grad(loss_x, x))
    if params is not None and pg:
        for name, grad in pg.items():
            base = getattr(params, name)

            def loss_p(v, name=name, base=base):
                old = base.copy()
                base[...] = v
                try:
                    return float(np.sum(forward(x, params)[0] * r))
                finally:
                    base[...] = old

            ok_p, err_p = _within(grad, finite_difference_grad(loss_p, base.copy()))
            ok, worst = ok and ok_p, max(worst, err_p)
    return ok, worst
