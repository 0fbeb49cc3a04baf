"""Finite-difference gradient oracle shared by the op tests and the acceptance gate.

The oracle re-executes a graph builder on float64 tensors, backpropagates once
for the analytic gradients, then compares sampled coordinates against central
differences of the same float64 forward function. Builders must be pure: each
call constructs its own graph-side state (e.g. fresh batch-norm stats) so that
repeated executions agree except for the perturbed coordinate.
"""
from __future__ import annotations

import numpy as np

from segforge import autodiff as ad


def weighted_sum(g: ad.Graph, t: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    """Scalar probe loss sum(w * t), recorded with its analytic backward."""
    w = np.asarray(weights, dtype=t.data.dtype)
    out = ad.Tensor(np.asarray((t.data * w).sum()), dtype=t.data.dtype)

    def backward_fn(dout):
        return (dout * w,)

    return g.record(out, (t,), backward_fn)


def _forward_value(build, arrays) -> float:
    g = ad.Graph()
    loss = build(g, [ad.Tensor(a, dtype=np.float64) for a in arrays])
    return float(loss.data.reshape(()))


def fd_max_rel_error(build, arrays, n_samples: int = 6, h: float = 1e-6,
                     rng=None) -> float:
    """Worst relative gradient error over sampled coordinates of every input.

    ``build(g, tensors) -> scalar loss Tensor`` runs in float64; the relative
    error at a coordinate is |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    g = ad.Graph()
    loss = build(g, tensors)
    ad.backward(g, loss)
    grads = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for ti, base in enumerate(arrays):
        count = min(n_samples, base.size)
        coords = rng.choice(base.size, size=count, replace=False)
        for cix in coords:
            orig = base.flat[cix]
            step = h * max(1.0, abs(orig))
            pert = [a if i != ti else a.copy() for i, a in enumerate(arrays)]
            pert[ti].flat[cix] = orig + step
            plus = _forward_value(build, pert)
            pert[ti].flat[cix] = orig - step
            minus = _forward_value(build, pert)
            central = (plus - minus) / (2.0 * step)
            analytic = float(grads[ti].flat[cix])
            denom = max(abs(analytic), abs(central), 1e-8)
            worst = max(worst, abs(analytic - central) / denom)
    return worst


def _case_conv2d(seed: int):
    rng = np.random.default_rng(seed)
    padding = "same" if seed % 2 == 0 else "valid"
    x = rng.normal(size=(2, 3, 5, 5))
    w = 0.5 * rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    out_hw = 5 if padding == "same" else 3
    wts = rng.normal(size=(2, 4, out_hw, out_hw))

    def build(g, ts):
        y = ad.conv2d(g, ts[0], ts[1], ts[2], padding=padding)
        return weighted_sum(g, y, wts)

    return build, [x, w, b]


def _case_maxpool2d(seed: int):
    rng = np.random.default_rng(seed)
    # Distinct values with gaps far above the FD step keep argmax stable.
    x = 0.01 * rng.permutation(2 * 3 * 4 * 4).astype(np.float64).reshape(2, 3, 4, 4)
    wts = rng.normal(size=(2, 3, 2, 2))

    def build(g, ts):
        return weighted_sum(g, ad.maxpool2d(g, ts[0]), wts)

    return build, [x]


def _case_upsample2d_nearest(seed: int):
    rng = np.random.default_rng(seed)
    factor = 1 if seed % 5 == 0 else 2
    x = rng.normal(size=(2, 3, 3, 3))
    wts = rng.normal(size=(2, 3, 3 * factor, 3 * factor))

    def build(g, ts):
        return weighted_sum(g, ad.upsample2d_nearest(g, ts[0], factor=factor), wts)

    return build, [x]


def _case_batchnorm2d_train(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    gamma = rng.uniform(0.5, 1.5, size=3)
    beta = rng.normal(size=3)
    wts = rng.normal(size=(2, 3, 4, 4))

    def build(g, ts):
        state = ad.BatchNormState(3, dtype=np.float64)
        y = ad.batchnorm2d(g, ts[0], ts[1], ts[2], state, "train")
        return weighted_sum(g, y, wts)

    return build, [x, gamma, beta]


def _case_batchnorm2d_infer(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    gamma = rng.uniform(0.5, 1.5, size=3)
    beta = rng.normal(size=3)
    run_mean = rng.normal(size=3)
    run_var = rng.uniform(0.5, 2.0, size=3)
    wts = rng.normal(size=(2, 3, 4, 4))

    def build(g, ts):
        state = ad.BatchNormState(3, dtype=np.float64)
        state.running_mean = run_mean.copy()
        state.running_var = run_var.copy()
        state.batches_seen = 1
        y = ad.batchnorm2d(g, ts[0], ts[1], ts[2], state, "infer")
        return weighted_sum(g, y, wts)

    return build, [x, gamma, beta]


def _case_relu(seed: int):
    rng = np.random.default_rng(seed)
    # Keep values away from the kink at 0 so central differences are valid.
    x = rng.uniform(0.05, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
    wts = rng.normal(size=(2, 3, 4, 4))

    def build(g, ts):
        return weighted_sum(g, ad.relu(g, ts[0]), wts)

    return build, [x]


def _case_softmax_channel(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 3, 3))
    wts = rng.normal(size=(2, 5, 3, 3))

    def build(g, ts):
        return weighted_sum(g, ad.softmax_channel(g, ts[0]), wts)

    return build, [x]


def _case_concat_channel(seed: int):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(2, 2, 4, 4))
    wts = rng.normal(size=(2, 5, 4, 4))

    def build(g, ts):
        return weighted_sum(g, ad.concat_channel(g, ts[0], ts[1]), wts)

    return build, [a, b]


def _case_dropout(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    wts = rng.normal(size=(2, 3, 4, 4))

    def build(g, ts):
        return weighted_sum(g, ad.dropout(g, ts[0], 0.3, "train", seed=seed), wts)

    return build, [x]


OP_CASES = {
    "conv2d": _case_conv2d,
    "maxpool2d": _case_maxpool2d,
    "upsample2d_nearest": _case_upsample2d_nearest,
    "batchnorm2d_train": _case_batchnorm2d_train,
    "batchnorm2d_infer": _case_batchnorm2d_infer,
    "relu": _case_relu,
    "softmax_channel": _case_softmax_channel,
    "concat_channel": _case_concat_channel,
    "dropout": _case_dropout,
}


def unet_composite_max_rel_error(cfg, seed: int, loss_name: str = "gdl",
                                 analytic_dtype=np.float32,
                                 n_per_tensor: int = 3, h: float = 1e-6,
                                 floor: float = 1e-6) -> float:
    """Worst FD relative error over the full U-Net + loss composite.

    The analytic side runs the model at ``analytic_dtype``; the oracle side
    re-executes the same forward on a float64 twin (same dropout seed, fresh
    batch-norm batch statistics) and central-differences sampled coordinates
    of every parameter tensor and of the input. ``floor`` bounds the error
    denominator: some coordinates (conv biases feeding a batchnorm) have a
    structurally zero gradient, where central differences return only
    roundoff noise of order eps * |loss| / h and a pure relative error would
    be meaningless.
    """
    from segforge import model as md
    from segforge import objectives as ob

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, cfg.in_channels, 16, 16))
    labels = rng.integers(0, cfg.num_classes, size=(1, 16, 16))

    def run(m, x_arr, dtype):
        onehot = ob.one_hot(labels, cfg.num_classes, dtype=dtype)
        g = ad.Graph()
        xt = ad.Tensor(x_arr, requires_grad=True, dtype=dtype)
        logits = m.forward(g, xt, "train", dropout_seed=seed)
        probs = ad.softmax_channel(g, logits)
        fn = ob.gdl if loss_name == "gdl" else ob.mae
        return g, xt, fn(g, probs, onehot)

    m32 = md.build_unet(cfg, dtype=analytic_dtype)
    g, xt, loss = run(m32, x, analytic_dtype)
    ad.backward(g, loss)

    m64 = md.build_unet(cfg, dtype=np.float64)
    for name, t in m64.params.items():
        t.data = m32.params[name].data.astype(np.float64)
    x64 = x.astype(np.float64)

    def value() -> float:
        for s in m64.bn.values():  # keep the oracle forward state-independent
            s.batches_seen = 0
        _, _, l64 = run(m64, x64, np.float64)
        return float(l64.data.reshape(()))

    worst = 0.0
    probes = [(None, xt.grad, x64)]
    probes += [(name, m32.params[name].grad, m64.params[name].data)
               for name in sorted(m32.params)]
    for name, analytic, target in probes:
        flat = target.reshape(-1)
        k = min(n_per_tensor, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            step = h * max(1.0, abs(flat[idx]))
            keep = flat[idx]
            flat[idx] = keep + step
            up = value()
            flat[idx] = keep - step
            down = value()
            flat[idx] = keep
            central = (up - down) / (2.0 * step)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - central) / max(abs(a), abs(central), floor)
            worst = max(worst, err)
    return worst
