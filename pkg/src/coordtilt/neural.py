"""Small ReLU multilayer perceptron with hand-written backprop and Adam."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class Mlp:
    """Fully connected net, ReLU on hidden layers, identity output.

    Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``x`` of
    shape ``(B, fan_in)`` maps to ``x @ W + b``.
    """

    def __init__(self, dims, seed=None, zero=False):
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError(f"invalid layer dimensions {dims}")
        rng = np.random.default_rng(seed)
        self.params = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = np.sqrt(6.0 / fan_in)  # He-uniform
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.params += [w, np.zeros(fan_out)]

    @property
    def n_layers(self):
        return len(self.dims) - 1

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dims[0]:
            raise ValueError(f"expected input dimension {self.dims[0]}, got {x.shape[-1]}")
        return x

    def activations(self, x):
        """Layer outputs, input first and network output last."""
        x = self._check_input(x)
        acts = [x]
        for k in range(self.n_layers):
            w, b = self.params[2 * k], self.params[2 * k + 1]
            z = acts[-1] @ w + b
            acts.append(np.maximum(z, 0.0) if k < self.n_layers - 1 else z)
        return acts

    def forward(self, x):
        return self.activations(x)[-1]

    __call__ = forward

    def backward(self, x, output_grad, activations=None):
        """Gradient of ``sum(forward(x) * output_grad)`` w.r.t. every parameter.

        Batched inputs accumulate (sum) over the leading axis.
        """
        acts = activations if activations is not None else self.activations(x)
        g = np.asarray(output_grad, dtype=float)
        if g.shape != acts[-1].shape:
            raise ValueError(f"output_grad shape {g.shape} != output shape {acts[-1].shape}")
        grads = [None] * len(self.params)
        for k in reversed(range(self.n_layers)):
            a_in = acts[k]
            if a_in.ndim == 1:
                grads[2 * k] = np.outer(a_in, g)
                grads[2 * k + 1] = g.copy()
            else:
                grads[2 * k] = a_in.T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            if k:
                g = (g @ self.params[2 * k].T) * (acts[k] > 0)
        return grads

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        offset = 0
        for k, p in enumerate(self.params):
            self.params[k] = flat[offset : offset + p.size].reshape(p.shape).copy()
            offset += p.size


def clone_into_target(net: Mlp) -> Mlp:
    return copy.deepcopy(net)


def copy_params(src: Mlp, dst: Mlp):
    dst.params = [p.copy() for p in src.params]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: Mlp, lr=1e-4, **kwargs):
        return cls([np.zeros_like(p) for p in net.params], [np.zeros_like(p) for p in net.params], lr=lr, **kwargs)


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm=10.0):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def adam_step(net: Mlp, state: AdamState, grads):
    """One bias-corrected Adam update, in place. Returns ``(net, state)``."""
    if len(grads) != len(net.params) or any(g.shape != p.shape for g, p in zip(grads, net.params)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.isfinite(g).all() for g in grads):
        raise FloatingPointError("non-finite gradient; parameters left untouched")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in enumerate(grads):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        net.params[k] = net.params[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return net, state


def net_to_dict(net: Mlp, state: AdamState | None = None):
    doc = {"version": FORMAT_VERSION, "dims": list(net.dims), "params": net.get_flat().tolist()}
    if state is not None:
        doc["optimizer"] = {
            "m": np.concatenate([a.ravel() for a in state.m]).tolist(),
            "v": np.concatenate([a.ravel() for a in state.v]).tolist(),
            "lr": state.lr,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
        }
        doc["step"] = state.step
    return doc


def net_from_dict(doc):
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    net = Mlp(doc["dims"], zero=True)
    net.set_flat(doc["params"])
    state = None
    if "optimizer" in doc:
        opt = doc["optimizer"]
        shapes = [p.shape for p in net.params]

        def unflatten(flat):
            flat = np.asarray(flat, dtype=float)
            out, offset = [], 0
            for s in shapes:
                size = int(np.prod(s))
                out.append(flat[offset : offset + size].reshape(s).copy())
                offset += size
            return out

        state = AdamState(
            unflatten(opt["m"]), unflatten(opt["v"]), doc.get("step", 0),
            opt["lr"], opt["beta1"], opt["beta2"], opt["eps"],
        )
    return net, state


def save_checkpoint(path, net: Mlp, state: AdamState | None = None):
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(net_to_dict(net, state)))


def load_checkpoint(path):
    return net_from_dict(json.loads(Path(path).read_text()))
