"""Independent reference implementations used as test oracles.

These are written in plain scalar Python on purpose and share no code with
the package beyond the data containers they read.
"""
from __future__ import annotations

import math

import numpy as np


def central_difference(f, params, eps=1e-5):
    """d f / d p for every entry of every array in ``params`` (perturbed in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = f()
            flat[k] = old - eps
            down = f()
            flat[k] = old
            gflat[k] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-7):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def hand_step(positions, velocities, radii, max_speeds, kinds, actions, cfg):
    """One physics step written out entity by entity.

    kinds: 0 predator, 1 prey, 2 landmark. Actions are given for the
    non-landmark entities in order.
    """
    n = len(kinds)
    new_p = [list(map(float, p)) for p in positions]
    new_v = [[0.0, 0.0] for _ in range(n)]
    agent = 0
    for e in range(n):
        if kinds[e] == 2:
            continue
        a = actions[agent]
        agent += 1
        fx = (a[1] - a[2]) * cfg.force_gain
        fy = (a[3] - a[4]) * cfg.force_gain
        for l in range(n):
            if kinds[l] != 2:
                continue
            dx = positions[e][0] - positions[l][0]
            dy = positions[e][1] - positions[l][1]
            dist = math.sqrt(dx * dx + dy * dy)
            depth = radii[e] + radii[l] - dist
            if depth > 0 and dist > 0:
                fx += cfg.contact_stiffness * depth / dist * dx
                fy += cfg.contact_stiffness * depth / dist * dy
        mass = cfg.mass_predator if kinds[e] == 0 else cfg.mass_prey
        vx = velocities[e][0] * (1 - cfg.damping) + fx / mass * cfg.dt
        vy = velocities[e][1] * (1 - cfg.damping) + fy / mass * cfg.dt
        speed = math.sqrt(vx * vx + vy * vy)
        if speed > max_speeds[e]:
            vx *= max_speeds[e] / speed
            vy *= max_speeds[e] / speed
        new_v[e] = [vx, vy]
        new_p[e] = [positions[e][0] + vx * cfg.dt, positions[e][1] + vy * cfg.dt]
    return np.array(new_p), np.array(new_v)


class ReferenceArchive:
    """Dict of key -> [min trajectory length, visit count]."""

    def __init__(self):
        self.cells = {}

    def add(self, key, length):
        if key not in self.cells:
            self.cells[key] = [length, 1]
        else:
            entry = self.cells[key]
            entry[1] += 1
            entry[0] = min(entry[0], length)


class ListRing:
    """Ring buffer semantics by plain list manipulation."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.items = []

    def push(self, x):
        self.items.append(x)
        if len(self.items) > self.capacity:
            self.items.pop(0)


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    if kind == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(kind)


def batched_central_difference(layers, x, loss, eps=1e-5):
    """Central differences of ``loss`` w.r.t. every weight and bias of a dense stack.

    ``layers`` is a list of (W, b, activation) with W shaped (out, in). Moving
    W[i, j] by +-eps moves unit i's pre-activation by +-eps * h[:, j], so all
    perturbations of one layer are evaluated as a single batch through a plain
    numpy re-implementation of the remaining layers. ``loss`` maps an array of
    outputs shaped (P, B, n_out) to P scalars. Returns [dW0, db0, dW1, ...].
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    hs, zs = [x], []
    for w, b, kind in layers:
        zs.append(hs[-1] @ w.T + b)
        hs.append(_act(zs[-1], kind))

    def tail(k, z):
        h = _act(z, layers[k][2])
        for w, b, kind in layers[k + 1:]:
            h = _act(h @ w.T + b, kind)
        return loss(h)

    grads = []
    for k, (w, b, _) in enumerate(layers):
        out, n_in = w.shape
        h_prev, z = hs[k], zs[k]
        # weight perturbations, flattened in C order over (i, j)
        shift = np.zeros((out * n_in, len(x), out))
        rows = np.repeat(np.arange(out), n_in)
        cols = np.tile(np.arange(n_in), out)
        shift[np.arange(out * n_in), :, rows] = eps * h_prev[:, cols].T
        dw = (tail(k, z + shift) - tail(k, z - shift)) / (2 * eps)
        bshift = np.zeros((out, len(x), out))
        bshift[np.arange(out), :, np.arange(out)] = eps
        db = (tail(k, z + bshift) - tail(k, z - bshift)) / (2 * eps)
        grads += [dw.reshape(out, n_in), db]
    return grads


def relu_margin(layers, x):
    """Smallest |pre-activation| over all ReLU units; near zero means a kink is close."""
    h = np.atleast_2d(x)
    worst = np.inf
    for w, b, kind in layers:
        z = h @ w.T + b
        if kind == "relu":
            worst = min(worst, float(np.abs(z).min()))
        h = _act(z, kind)
    return worst
