import numpy as np

from ..errors import MisalignedGrads


def _check(params, grads):
    for name, g in grads.items():
        if name not in params.trainable:
            raise MisalignedGrads(f"gradient for unknown or frozen parameter {name!r}")
        if g.shape != params[name].shape:
            raise MisalignedGrads(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")


def sgd_step(params, grads, lr):
    """Plain gradient descent, in place: ``w <- w - lr * g``."""
    _check(params, grads)
    for name, g in grads.items():
        w = params[name]
        w -= (lr * g).astype(w.dtype)
    params.step += 1
    return params


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-7):
    """Bias-corrected Adam, in place. Moments live in ``params.opt_state``."""
    _check(params, grads)
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        w = params[name]
        if name not in params.opt_state:
            params.opt_state[name] = (np.zeros_like(w), np.zeros_like(w))
        m, v = params.opt_state[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype)
    return params


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, params, grads):
        return adam_step(params, grads, self.lr, self.beta1, self.beta2, self.eps)


class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params, grads):
        return sgd_step(params, grads, self.lr)


def make_optimizer(name, lr):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")
