"""Central finite-difference checks for layers and networks (fp64)."""
import numpy as np

H = 1e-6


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _sample(shape, n_points, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(n_points, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check_layer(layer, x, mode=None, training=True, n_points=100, seed=0, params=None):
    """Relative errors of d(sum(out * r))/d(input and params) against central differences.

    ``params`` limits which parameters are checked (default: all). Each entry
    covers at least ``n_points`` coordinates, or every coordinate if fewer.
    """
    rng = np.random.default_rng(seed)
    kwargs = {} if mode is None else {"mode": mode}

    def run(inp):
        return layer.forward(inp, training=training, **kwargs)

    out = run(x)
    r = rng.standard_normal(out.shape)
    layer.zero_grad()
    gx = layer.backward(r)
    analytic = {"x": gx, **{k: layer.grads[k] for k in (params or layer.params)}}

    def loss_at(inp):
        val = float(np.sum(run(inp) * r))
        layer.tape = None
        return val

    errors = {}
    for name, grad in analytic.items():
        target = x if name == "x" else layer.params[name]
        idx = _sample(target.shape, n_points, rng)
        fd = []
        for i in idx:
            old = target[i]
            target[i] = old + H
            up = loss_at(x)
            target[i] = old - H
            down = loss_at(x)
            target[i] = old
            fd.append((up - down) / (2 * H))
        errors[name] = rel_error([grad[i] for i in idx], fd)
    return errors


def check_network(net, x, mode, n_points=100, seed=0):
    """Same check through a whole graph; loss sums every output tap against a random projection."""
    rng = np.random.default_rng(seed)
    outs = net.forward(x, mode, training=True)
    rs = [rng.standard_normal(o.shape) for o in outs]
    net.zero_grad()
    net.backward(rs)
    grads = net.gradients()

    def loss():
        val = sum(float(np.sum(o * r)) for o, r in zip(net.forward(x, mode, training=True), rs))
        for layer in net.layers.values():
            if layer is not None:
                layer.tape = None
        return val

    errors = {}
    params = net.parameters()
    for key in sorted(grads):
        p = params[key]
        idx = _sample(p.shape, max(1, n_points // 10), rng)
        fd = []
        for i in idx:
            old = p[i]
            p[i] = old + H
            up = loss()
            p[i] = old - H
            down = loss()
            p[i] = old
            fd.append((up - down) / (2 * H))
        errors[key] = rel_error([grads[key][i] for i in idx], fd)
    return errors


def away_from_zero(rng, shape, gap=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def distinct_values(rng, shape):
    """Values with pairwise gaps far above the difference step (for max pooling)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.01 + 0.3).astype(np.float64)
