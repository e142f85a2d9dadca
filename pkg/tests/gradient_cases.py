"""Shared gradient-check fixtures: one scalar test function per autodiff op kind."""

import numpy as np

from plab.autodiff import Tensor, ops


def away_from_kinks(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += 2 * margin
    return x


def op_cases():
    """(name, scalar function of one tensor, input shape) for every op kind."""
    rng = np.random.default_rng(1234)
    w3 = rng.normal(size=(2, 3, 3, 3))
    w1 = rng.normal(size=(3, 2, 1, 1))
    other = rng.normal(size=(3, 4))
    weights = rng.normal(size=(4, 3))
    proj = rng.normal(size=(2, 3, 2, 2))
    return [
        ("add", lambda t: ops.sum(ops.mul(ops.add(t, Tensor(other)), ops.add(t, t))), (3, 4)),
        ("sub", lambda t: ops.sum(ops.mul(ops.sub(t, Tensor(other)), t)), (3, 4)),
        ("mul", lambda t: ops.sum(ops.mul(t, Tensor(other))), (3, 4)),
        ("scalar_mul", lambda t: ops.sum(ops.mul(ops.scalar_mul(t, -2.5), t)), (3, 4)),
        ("add_scalar", lambda t: ops.sum(ops.mul(ops.add_scalar(t, 0.7), t)), (3, 4)),
        ("relu", lambda t: ops.sum(ops.mul(ops.relu(t), Tensor(other))), (3, 4)),
        ("log", lambda t: ops.sum(ops.log(ops.add_scalar(ops.mul(t, t), 0.5))), (3, 4)),
        ("exp", lambda t: ops.sum(ops.exp(ops.scalar_mul(t, 0.5))), (3, 4)),
        ("cos", lambda t: ops.sum(ops.cos(t)), (3, 4)),
        ("acos", lambda t: ops.sum(ops.acos(ops.scalar_mul(t, 0.2))), (3, 4)),
        ("clamp", lambda t: ops.sum(ops.mul(ops.clamp(t, -0.5, 0.5), Tensor(other))), (3, 4)),
        ("reshape", lambda t: ops.sum(ops.mul(ops.reshape(t, (4, 3)), Tensor(other.T))), (3, 4)),
        ("transpose", lambda t: ops.sum(ops.mul(ops.transpose(t), Tensor(other.T))), (3, 4)),
        ("concat", lambda t: ops.sum(ops.mul(ops.concat([t, ops.scalar_mul(t, 2.0)], axis=1),
                                             Tensor(np.concatenate([other, other], axis=1)))), (3, 4)),
        ("sum", lambda t: ops.sum(ops.mul(ops.sum(t, axis=0), ops.sum(t, axis=0))), (3, 4)),
        ("matmul", lambda t: ops.sum(ops.mul(ops.matmul(t, Tensor(weights)), ops.matmul(t, Tensor(weights)))), (3, 4)),
        ("logsumexp", lambda t: ops.sum(ops.logsumexp(t)), (3, 4)),
        ("pick", lambda t: ops.sum(ops.mul(ops.pick(t, [0, 3, 1]), ops.pick(t, [2, 2, 2]))), (3, 4)),
        ("index_put", lambda t: ops.sum(ops.mul(ops.index_put(t, [1, 0, 3], ops.pick(ops.exp(t), [0, 0, 0])),
                                                Tensor(other))), (3, 4)),
        ("l2norm", lambda t: ops.sum(ops.mul(ops.l2norm(t, 3.0), Tensor(other))), (3, 4)),
        ("conv2d", lambda t: ops.sum(ops.mul(ops.conv2d(t, Tensor(w3), stride=2, padding=1),
                                             Tensor(proj[:, :2].copy()))), (2, 3, 4, 4)),
        ("conv2d_1x1", lambda t: ops.sum(ops.exp(ops.scalar_mul(ops.conv2d(t, Tensor(w1)), 0.3))), (1, 2, 3, 3)),
        ("maxpool2d", lambda t: ops.sum(ops.mul(ops.maxpool2d(t, 3, stride=2, padding=1),
                                                Tensor(proj[:, :2].copy()))), (2, 2, 4, 4)),
        ("avgpool2d", lambda t: ops.sum(ops.mul(ops.avgpool2d(t, 2), Tensor(proj[:, :2].copy()))), (2, 2, 4, 4)),
        ("adaptive_avgpool", lambda t: ops.sum(ops.mul(ops.adaptive_avgpool(t, 2), Tensor(proj[:, :2].copy()))),
         (2, 2, 5, 3)),
    ]


def op_input(name, shape, seed):
    """Random input for ``name`` that keeps finite differences away from kinks."""
    rng = np.random.default_rng(seed)
    if name == "maxpool2d":
        # distinct values keep every window's max well separated
        return rng.permutation(np.arange(int(np.prod(shape)), dtype=float)).reshape(shape) * 0.1
    return away_from_kinks(rng, shape)
