"""Pure-numpy kernels; the reference the compiled kernels are checked against.

Parameters of a biased factor model live in one flat float64 vector laid
out as ``[theta (m*d), beta (n*d), b_user (m), b_item (n), b_global (1)]``.
"""
import numpy as np

SQUARED = 0
ABSOLUTE = 1


def unpack(params, m, n, d):
    o1 = m * d
    o2 = o1 + n * d
    o3 = o2 + m
    o4 = o3 + n
    theta = params[:o1].reshape(m, d)
    beta = params[o1:o2].reshape(n, d)
    return theta, beta, params[o2:o3], params[o3:o4], params[o4:o4 + 1]


def predict_pairs(params, m, n, d, users, items):
    theta, beta, bu, bi, bg = unpack(params, m, n, d)
    return np.einsum("ij,ij->i", theta[users], beta[items]) + bu[users] + bi[items] + bg[0]


def _accumulate(params, grad, m, n, d, users, items, targets, weights, idx, loss_kind):
    theta, beta, bu, bi, bg = unpack(params, m, n, d)
    g_theta, g_beta, g_bu, g_bi, g_bg = unpack(grad, m, n, d)
    u = users[idx]
    i = items[idx]
    pred = np.einsum("ij,ij->i", theta[u], beta[i]) + bu[u] + bi[i] + bg[0]
    resid = pred - targets[idx]
    dloss = 2.0 * resid if loss_kind == SQUARED else np.sign(resid)
    g = weights[idx] * dloss / len(idx)
    np.add.at(g_theta, u, g[:, None] * beta[i])
    np.add.at(g_beta, i, g[:, None] * theta[u])
    np.add.at(g_bu, u, g)
    np.add.at(g_bi, i, g)
    g_bg[0] += g.sum()


def gradient(params, m, n, d, users, items, targets, weights, l2, loss_kind):
    """Gradient of the weighted mean loss plus the L2 penalty over all records."""
    grad = np.zeros_like(params)
    _accumulate(params, grad, m, n, d, users, items, targets, weights,
                np.arange(len(users)), loss_kind)
    grad[:-1] += 2.0 * l2 * params[:-1]
    return grad


def adam_epoch(params, m1, m2, grad, m, n, d, users, items, targets, weights, order,
               batch_size, lr, beta1, beta2, eps, l2, loss_kind, step):
    """One shuffled pass of mini-batch Adam; returns the updated step count.

    ``params``, ``m1``, ``m2`` and ``grad`` are modified in place.  ``grad``
    is scratch space and is left zeroed.  The global bias (last entry) is
    not regularized.
    """
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        _accumulate(params, grad, m, n, d, users, items, targets, weights, idx, loss_kind)
        step += 1
        grad[:-1] += 2.0 * l2 * params[:-1]
        m1 *= beta1
        m1 += (1.0 - beta1) * grad
        m2 *= beta2
        m2 += (1.0 - beta2) * grad * grad
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        params -= lr * (m1 / bc1) / (np.sqrt(m2 / bc2) + eps)
        grad[:] = 0.0
    return step
