"""Independent reference implementations used as test oracles.

Everything here recomputes expected values through a different code path
than the package (explicit loops, lstsq instead of normal equations,
central finite differences instead of backprop) so the tests stay
meaningful.
"""

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

from posefuse.toygan import _activate, forward


def pairwise_diffs(keypoints) -> np.ndarray:
    """Loop-written pairwise-difference feature (the enumeration contract)."""
    kp = np.asarray(keypoints, dtype=np.float64)
    values = []
    for i in range(len(kp)):
        for j in range(i + 1, len(kp)):
            values.append(kp[i, 0] - kp[j, 0])
            values.append(kp[i, 1] - kp[j, 1])
    return np.array(values)


def similarity_oracle(candidate_kps, target_kps) -> float:
    """Straight-line aligned-cosine: lstsq affine fit, then feature cosine."""
    src = np.asarray(candidate_kps, dtype=np.float64)
    dst = np.asarray(target_kps, dtype=np.float64)
    design = np.concatenate([src, np.ones((len(src), 1))], axis=1)
    theta, *_ = np.linalg.lstsq(design, dst, rcond=None)
    fu = pairwise_diffs(design @ theta)
    fv = pairwise_diffs(dst)
    return float(fu @ fv / (np.linalg.norm(fu) * np.linalg.norm(fv)))


def box_blur_oracle(data, radius) -> np.ndarray:
    """Direct windowed mean with clamp-to-edge, no separability tricks."""
    h, w, c = data.shape
    out = np.empty_like(data)
    for y in range(h):
        for x in range(w):
            acc = np.zeros(c)
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc += data[yy, xx]
            out[y, x] = acc / (2 * radius + 1) ** 2
    return out


SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def sobel_magnitude_oracle(lum) -> np.ndarray:
    """Direct 3x3 Sobel correlation with clamp-to-edge, then magnitude."""
    h, w = lum.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    gx[y, x] += SOBEL_X[dy + 1, dx + 1] * lum[yy, xx]
                    gy[y, x] += SOBEL_X[dx + 1, dy + 1] * lum[yy, xx]
    return np.hypot(gx, gy)


def histogram_oracle(data, bins, weights=None):
    """Per-pixel accumulation histogram, normalized per channel."""
    h, w, c = data.shape
    if weights is None:
        weights = np.ones((h, w))
    out = np.zeros(bins * c)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                b = min(int(data[y, x, ch] * bins), bins - 1)
                out[ch * bins + b] += weights[y, x]
    for ch in range(c):
        block = out[ch * bins:(ch + 1) * bins]
        out[ch * bins:(ch + 1) * bins] = block / block.sum()
    return out


def probe_value(net, x, g) -> float:
    """<g, net(x)> evaluated by a plain forward pass."""
    out, _ = forward(net, np.asarray(x, dtype=np.float64))
    return float(out @ np.asarray(g, dtype=np.float64))


def naive_probe_grads(net, x, g, h=1e-4):
    """Per-parameter central differences of <g, net(x)>.  O(params) forward
    passes; only usable on small nets."""
    grads = []
    for layer in net.layers:
        dw = np.zeros_like(layer.weights)
        for i in range(layer.weights.shape[0]):
            for j in range(layer.weights.shape[1]):
                orig = layer.weights[i, j]
                layer.weights[i, j] = orig + h
                hi = probe_value(net, x, g)
                layer.weights[i, j] = orig - h
                lo = probe_value(net, x, g)
                layer.weights[i, j] = orig
                dw[i, j] = (hi - lo) / (2 * h)
        db = np.zeros_like(layer.bias)
        for i in range(layer.bias.shape[0]):
            orig = layer.bias[i]
            layer.bias[i] = orig + h
            hi = probe_value(net, x, g)
            layer.bias[i] = orig - h
            lo = probe_value(net, x, g)
            layer.bias[i] = orig
            db[i] = (hi - lo) / (2 * h)
        grads.append((dw, db))
    return grads


if numba is not None:
    @numba.njit(cache=True, fastmath=True)
    def _phi_sigmoid(z2, col, g, deltas):  # pragma: no cover - exercised below
        out = np.empty(len(deltas))
        for p in range(len(deltas)):
            acc = 0.0
            for o in range(len(z2)):
                v = z2[o] + deltas[p] * col[o]
                acc += g[o] / (1.0 + np.exp(-v))
            out[p] = acc
        return out


def _phi(activation, z2, col, g, deltas):
    """<g, act(z2 + delta * col)> for a batch of scalar deltas."""
    if numba is not None and activation == "sigmoid":
        return _phi_sigmoid(z2, col, g, deltas)
    return _activate(activation, z2[None, :] + deltas[:, None] * col[None, :]) @ g


def fast_probe_grads(net, x, g, h=1e-4):
    """Central differences of <g, net(x)> for every parameter of a 2-layer net.

    Produces the same quotients as naive_probe_grads (a perturbation of one
    parameter shifts exactly one pre-activation coordinate, so the perturbed
    value can be evaluated without a full forward pass), just batched so the
    full default-size nets finish in seconds.
    """
    assert len(net.layers) == 2, "structured probe supports exactly 2 layers"
    first, second = net.layers
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    z1 = first.weights @ x + first.bias
    a1 = _activate(first.activation, z1)
    z2 = second.weights @ a1 + second.bias

    # second layer: W2[i, j] (j == hidden slot -> bias) shifts z2_i alone
    a1_aug = np.append(a1, 1.0)
    hi = _activate(second.activation, z2[:, None] + h * a1_aug[None, :])
    lo = _activate(second.activation, z2[:, None] - h * a1_aug[None, :])
    fd2 = g[:, None] * (hi - lo) / (2.0 * h)
    grads2 = (fd2[:, :-1], fd2[:, -1])

    # first layer: W1[i, j] moves z1_i; the activation delta rides down
    # column W2[:, i]
    x_aug = np.append(x, 1.0)
    dw1 = np.empty_like(first.weights)
    db1 = np.empty_like(first.bias)
    for i in range(len(z1)):
        delta_hi = _activate(first.activation, z1[i] + h * x_aug) - a1[i]
        delta_lo = _activate(first.activation, z1[i] - h * x_aug) - a1[i]
        col = np.ascontiguousarray(second.weights[:, i])
        phi_hi = _phi(second.activation, z2, col, g, delta_hi)
        phi_lo = _phi(second.activation, z2, col, g, delta_lo)
        fd = (phi_hi - phi_lo) / (2.0 * h)
        dw1[i] = fd[:-1]
        db1[i] = fd[-1]
    return [(dw1, db1), grads2]


def max_relative_error(analytic, numeric, atol=1e-7):
    """Worst per-parameter error of analytic vs numeric gradients, measured
    relative to the larger magnitude with an absolute floor."""
    worst = 0.0
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        for a, n in ((aw, nw), (ab, nb)):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / 1e-4)
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
