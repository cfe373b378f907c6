"""Reverse-mode automatic differentiation over the network primitives.

A forward pass builds a graph of Value nodes, each remembering its parent
nodes and a closure that maps the node's output gradient to its parents'
gradients. backward() walks the graph in reverse topological order and
accumulates gradients; seeded with d(loss)/d(loss) = 1.

Everything inside the graph is batched (B, H, W, C). Gradients carry the
dtype of the data, so running the whole model in float64 yields float64
gradients suitable for finite-difference checks. Gradient accumulation
follows the reverse topological visit order, which is a pure function of
the recorded graph: repeated backward passes are bit-identical. A tape is
single-writer; independent tapes (one per batch) may run concurrently.
"""

import numpy as np

from . import tensorops as T


class Value:
    """One node of the recorded computation."""

    __slots__ = ("data", "grad", "parents", "needs_grad", "_backward")

    def __init__(self, data, parents=(), backward=None, needs_grad=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = backward
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in self.parents)
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, dtype={self.data.dtype})"


class Param(Value):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, needs_grad=True)
        self.name = name

    def __repr__(self):
        return f"Param({self.name}, shape={self.data.shape})"


def _accumulate(node, g):
    node.grad = g if node.grad is None else node.grad + g


def _toposort(root):
    order, visited, stack = [], set(), [(root, iter(root.parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        child = next(it, None)
        if child is None:
            order.append(node)
            stack.pop()
        elif id(child) not in visited:
            visited.add(id(child))
            stack.append((child, iter(child.parents)))
    return order


def backward(loss, params=()):
    """Populate .grad for every node reachable from the scalar loss.

    Any previous gradients in the graph (and on the given params) are
    cleared first, so repeated calls give identical results. Params that
    the loss does not depend on end up with zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    for p in params:
        p.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# primitives


def dconv(x, w, b=None, dilation=1):
    """Dilated convolution node; w, b are Params, x a Value.

    The padded input from the forward pass is kept for the weight-gradient
    GEMMs so padding happens once per node.
    """
    k = w.data.shape[0]
    xd = x.data
    if k == 1:
        out_data = (xd.reshape(-1, xd.shape[3]) @ w.data[0, 0]).reshape(xd.shape[:3] + (-1,))
        xp = None
    else:
        xp = T._pad_same(xd, k, dilation)
        out_data = T._tap_conv(xp, w.data, dilation, xd.shape[1], xd.shape[2])
    if b is not None:
        out_data += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if x.needs_grad:
            _accumulate(x, T.dilated_conv2d_input_grad(g, w.data, dilation=dilation))
        if w.needs_grad:
            if k == 1:
                gw = (xd.reshape(-1, xd.shape[3]).T @ g.reshape(-1, g.shape[3]))[None, None]
            else:
                gw = T._tap_weight_grad(xp, g, k, dilation)
            _accumulate(w, gw)
        if b is not None and b.needs_grad:
            _accumulate(b, np.einsum("nc->c", g.reshape(-1, g.shape[3])))

    return Value(out_data, parents, bwd)


def conv1x1_multi(x, weights, biases):
    """Several 1x1 convolutions of the same input, fused into one GEMM.

    weights/biases are parallel lists of Params; returns one Value per
    branch. Mathematically identical to separate dconv(x, w_i, b_i, 1)
    calls, but the channel mixing runs as a single matrix product and the
    input gradient accumulates once. Branches without incoming gradient
    contribute zeros, exactly as separate nodes would.
    """
    xd = x.data
    cin = xd.shape[3]
    w_cat = np.concatenate([w.data[0, 0] for w in weights], axis=1)
    b_cat = np.concatenate([b.data for b in biases])
    out_cat = (xd.reshape(-1, cin) @ w_cat).reshape(xd.shape[:3] + (-1,))
    out_cat += b_cat

    widths = [w.data.shape[3] for w in weights]
    offsets = [0]
    for width in widths:
        offsets.append(offsets[-1] + width)

    def cat_bwd(g_cat):
        gflat = g_cat.reshape(-1, g_cat.shape[3])
        if x.needs_grad:
            _accumulate(x, (gflat @ w_cat.T).reshape(xd.shape))
        gw = xd.reshape(-1, cin).T @ gflat
        gb = np.einsum("nc->c", gflat)
        for j, (w, b) in enumerate(zip(weights, biases)):
            lo, hi = offsets[j], offsets[j + 1]
            if w.needs_grad:
                _accumulate(w, np.ascontiguousarray(gw[:, lo:hi])[None, None])
            if b.needs_grad:
                _accumulate(b, gb[lo:hi].copy())

    cat = Value(out_cat, (x,) + tuple(weights) + tuple(biases), cat_bwd)

    def make_slice_bwd(lo, hi):
        def bwd(g):
            # reverse topological order runs cat_bwd after all slice nodes
            if cat.grad is None:
                cat.grad = np.zeros_like(cat.data)
            cat.grad[..., lo:hi] += g

        return bwd

    return [
        Value(np.ascontiguousarray(out_cat[..., lo:hi]), (cat,), make_slice_bwd(lo, hi))
        for lo, hi in zip(offsets, offsets[1:])
    ]


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Per-channel batch normalization using batch statistics.

    Returns (out, batch_mean, batch_var); the caller owns the running-stat
    update. Gradients flow through the batch statistics.
    """
    xd = x.data
    c = xd.shape[-1]
    n = xd.size // c
    if n < 2:
        raise ValueError("batch normalization needs at least 2 values per channel")
    mean = xd.reshape(-1, c).mean(axis=0)
    centered = xd - mean
    cflat = centered.reshape(-1, c)
    var = np.einsum("nc,nc->c", cflat, cflat) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv_std
    xhat = centered * inv_std
    out_data = xhat * gamma.data + beta.data

    def bwd(g):
        gflat = g.reshape(-1, c)
        gx_sum = np.einsum("nc,nc->c", gflat, xhat.reshape(-1, c))
        g_sum = np.einsum("nc->c", gflat)
        if gamma.needs_grad:
            _accumulate(gamma, gx_sum)
        if beta.needs_grad:
            _accumulate(beta, g_sum)
        if x.needs_grad:
            dx = g - g_sum / n
            dx -= xhat * (gx_sum / n)
            dx *= scale
            _accumulate(x, dx)

    return Value(out_data, (x, gamma, beta), bwd), mean, var


def batchnorm_infer(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Frozen-statistics batch normalization (a per-channel affine map)."""
    scale = gamma.data / np.sqrt(running_var + eps)
    out_data = scale * (x.data - running_mean) + beta.data
    xhat = (x.data - running_mean) / np.sqrt(running_var + eps)

    def bwd(g):
        if gamma.needs_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 1, 2)))
        if beta.needs_grad:
            _accumulate(beta, g.sum(axis=(0, 1, 2)))
        if x.needs_grad:
            _accumulate(x, g * scale)

    return Value(out_data, (x, gamma, beta), bwd)


def relu(x):
    mask = x.data > 0

    def bwd(g):
        if x.needs_grad:
            _accumulate(x, g * mask)

    return Value(x.data * mask, (x,), bwd)


def sigmoid(x):
    s = T.sigmoid(x.data)

    def bwd(g):
        if x.needs_grad:
            _accumulate(x, g * s * (1.0 - s))

    return Value(s, (x,), bwd)


def maxpool(x):
    """2x2 max pooling via pairwise maxima and equality masks.

    Matches tensorops.maxpool2 exactly, including the first-in-row-major
    tie rule, but avoids the argmax scan.
    """
    xd = x.data
    if xd.shape[1] % 2 or xd.shape[2] % 2:
        raise ValueError(
            f"spatial dims must be even for 2x2 pooling, got {xd.shape[1]}x{xd.shape[2]}"
        )
    quads = (
        xd[:, 0::2, 0::2],
        xd[:, 0::2, 1::2],
        xd[:, 1::2, 0::2],
        xd[:, 1::2, 1::2],
    )
    out_data = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bwd(g):
        if not x.needs_grad:
            return
        gx = np.zeros_like(xd)
        taken = np.zeros(out_data.shape, dtype=bool)
        targets = (
            gx[:, 0::2, 0::2],
            gx[:, 0::2, 1::2],
            gx[:, 1::2, 0::2],
            gx[:, 1::2, 1::2],
        )
        for quad, target in zip(quads, targets):
            mask = (quad == out_data) & ~taken
            target += g * mask
            taken |= mask
        _accumulate(x, gx)

    return Value(out_data, (x,), bwd)


def upsample(x):
    def bwd(g):
        if x.needs_grad:
            _accumulate(x, T.upsample2_backward(g))

    return Value(T.upsample2(x.data), (x,), bwd)


def concat(a, b):
    split = a.data.shape[-1]

    def bwd(g):
        if a.needs_grad:
            _accumulate(a, g[..., :split])
        if b.needs_grad:
            _accumulate(b, g[..., split:])

    return Value(T.concat_channels(a.data, b.data), (a, b), bwd)


def concat_n(values):
    """Concatenate several Values along the channel axis in one copy."""
    bounds = [0]
    for v in values:
        bounds.append(bounds[-1] + v.data.shape[-1])

    def bwd(g):
        for v, lo, hi in zip(values, bounds, bounds[1:]):
            if v.needs_grad:
                _accumulate(v, g[..., lo:hi])

    return Value(np.concatenate([v.data for v in values], axis=-1), tuple(values), bwd)


def dice_loss(pred, target, eps=1.0):
    """Negative log of the class-averaged smoothed Dice, meaned over the batch.

    pred is a (B,H,W,K) Value of soft scores in [0,1]; target a constant
    binary array of the same shape. The smoothing term keeps the loss and
    its gradient finite for empty masks.
    """
    p = pred.data
    if p.shape != target.shape:
        raise ValueError(f"prediction {p.shape} and target {target.shape} differ")
    bsz, k = p.shape[0], p.shape[3]
    s_pg = np.einsum("bhwk,bhwk->bk", p, target)
    s_p = p.sum(axis=(1, 2))
    s_g = target.sum(axis=(1, 2))
    den = s_p + s_g + eps
    dice = (2.0 * s_pg + eps) / den
    mean_dice = dice.mean(axis=1)
    loss = -np.log(mean_dice).mean()

    def bwd(g):
        if pred.needs_grad:
            coeff = -g / (bsz * k) / (mean_dice[:, None] * den)
            _accumulate(pred, coeff[:, None, None, :] * (2.0 * target - dice[:, None, None, :]))

    return Value(np.asarray(loss, dtype=p.dtype), (pred,), bwd)


def ssum(x):
    """Sum of all elements, as a scalar node."""

    def bwd(g):
        if x.needs_grad:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return Value(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), bwd)


def mul(a, b):
    """Elementwise product; b may be a Value or a constant array."""
    if isinstance(b, Value):
        def bwd(g):
            if a.needs_grad:
                _accumulate(a, g * b.data)
            if b.needs_grad:
                _accumulate(b, g * a.data)

        return Value(a.data * b.data, (a, b), bwd)

    bc = np.asarray(b)

    def bwd(g):
        if a.needs_grad:
            _accumulate(a, g * bc)

    return Value(a.data * bc, (a,), bwd)


def sse_loss(pred, target):
    """Sum of squared errors against a constant target, as a scalar node."""
    diff = pred.data - target

    def bwd(g):
        if pred.needs_grad:
            _accumulate(pred, 2.0 * g * diff)

    return Value(np.asarray((diff * diff).sum(), dtype=pred.data.dtype), (pred,), bwd)


# ---------------------------------------------------------------------------
# finite differences


def numeric_grad(loss_fn, arr, coords, h=1e-4):
    """Central-difference gradient of loss_fn at the given flat coordinates.

    loss_fn takes no arguments and reads arr by reference; arr is restored
    exactly after each probe.
    """
    flat = arr.reshape(-1)
    out = np.empty(len(coords), dtype=np.float64)
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        lp = float(loss_fn())
        flat[c] = orig - h
        lm = float(loss_fn())
        flat[c] = orig
        out[i] = (lp - lm) / (2.0 * h)
    return out


def relative_errors(analytic, numeric, guard=1e-8):
    """Elementwise |a-n| / max(|a|,|n|), skipping entries below the guard."""
    a = np.abs(analytic)
    n = np.abs(numeric)
    keep = (a >= guard) | (n >= guard)
    rel = np.zeros_like(a)
    denom = np.maximum(a, n)
    rel[keep] = np.abs(analytic - numeric)[keep] / denom[keep]
    return rel, keep


def gradcheck(model, batch_x, batch_y, n_coords=100, h=1e-4, seed=0, eps=1.0):
    """Compare analytic and central-difference gradients of the Dice loss.

    The model is evaluated in float64 train mode without touching its
    running statistics. For every parameter tensor a random subset of
    min(n_coords, size) coordinates is probed. Returns a list of per-tensor
    report dicts with the max relative error; failures are report entries,
    never exceptions.
    """
    if batch_x.dtype != np.float64:
        raise ValueError("gradient checking requires float64 inputs")
    params = model.parameters()

    def loss_fn():
        out = model.forward(batch_x, train=True, update_running=False)
        return dice_loss(out, batch_y, eps=eps).data

    out = model.forward(batch_x, train=True, update_running=False)
    loss = dice_loss(out, batch_y, eps=eps)
    backward(loss, params)

    rng = np.random.default_rng(seed)
    report = []
    for p in params:
        size = p.data.size
        k = min(n_coords, size)
        coords = rng.choice(size, size=k, replace=False)
        numeric = numeric_grad(loss_fn, p.data, coords, h=h)
        analytic = p.grad.reshape(-1)[coords]
        rel, keep = relative_errors(analytic, numeric)
        n_kept = int(keep.sum())
        max_rel = float(rel.max()) if n_kept else 0.0
        report.append(
            {
                "name": p.name,
                "shape": tuple(p.data.shape),
                "checked": k,
                "compared": n_kept,
                "max_rel_err": max_rel,
                "all_finite": bool(np.isfinite(analytic).all() and np.isfinite(numeric).all()),
            }
        )
    return report
