#!/usr/bin/env python3
"""Reference implementation of the Lyapunov spectrum estimator.

Written independently of the Rust crate with numpy. QR is a plain
Householder so rank-deficient products follow the same zero-column rule. Used to regenerate the frozen golden values in
crates/core/tests/data/.

    python3 tools/lyap_reference.py random-golden > crates/core/tests/data/random_series_golden.json
    python3 tools/lyap_reference.py mnist-golden  > crates/core/tests/data/mnist_digit_golden.json
"""
import json
import struct
import sys

import numpy as np

EPS_FLOOR = 1e-12
RIDGE_SCALE = 1e-9
PIVOT_TOL = 1e-12
TIE_TOL = 1e-9
MASK64 = (1 << 64) - 1


def splitmix64(seed):
    state = seed & MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield (z ^ (z >> 31))


def uniform_series(seed, n):
    gen = splitmix64(seed)
    return np.array([(next(gen) >> 11) * 2.0 ** -53 for _ in range(n)])


def gram_is_singular(gram):
    """Cholesky breaks down: some pivot <= PIVOT_TOL * max diagonal."""
    d = gram.shape[0]
    scale = float(np.max(np.diag(gram)))
    low = np.zeros_like(gram)
    for j in range(d):
        pivot = gram[j, j] - low[j, :j] @ low[j, :j]
        if not pivot > PIVOT_TOL * scale:
            return True
        low[j, j] = np.sqrt(pivot)
        for i in range(j + 1, d):
            low[i, j] = (gram[i, j] - low[i, :j] @ low[j, :j]) / low[j, j]
    return False


def householder_qr(a):
    """Householder QR with diag(R) >= 0. Subcolumns of norm <= EPS_FLOOR are
    treated as exact zeros (no reflection)."""
    n = a.shape[0]
    r = a.astype(np.float64).copy()
    q = np.eye(n)
    for k in range(n - 1):
        col = r[k:, k]
        norm = np.linalg.norm(col)
        if norm <= EPS_FLOOR:
            r[k:, k] = 0.0
            continue
        if not np.any(col[1:]):
            continue
        v = col.copy()
        v[0] -= -norm if col[0] >= 0 else norm
        h = np.eye(n)
        h[k:, k:] -= 2.0 * np.outer(v, v) / (v @ v)
        r = h @ r
        r[k + 1:, k] = 0.0
        q = q @ h
    if abs(r[n - 1, n - 1]) <= EPS_FLOOR:
        r[n - 1, n - 1] = 0.0
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs, (r.T * signs).T


def lyap_e(x, emb_dim=10, matrix_dim=4, min_nb=8, min_tsep=0, tau=1.0):
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    d = matrix_dim
    m = (emb_dim - 1) // (d - 1)
    if np.var(x) == 0:
        raise ValueError("zero variance")
    n_orbit = n - emb_dim + 1
    tie_tol = TIE_TOL * (np.max(x) - np.min(x))
    orbit = np.stack([x[k:k + n_orbit] for k in range(emb_dim)], axis=1)
    last_valid = n - 1 - d * m
    valid = np.arange(last_valid + 1)
    q_prev = np.eye(d)
    sums = np.zeros(d)
    k_steps = 0
    for i in range(0, last_valid + 1, m):
        dist = np.max(np.abs(orbit[valid] - orbit[i]), axis=1)
        mask = np.abs(valid - i) > min_tsep
        cand = valid[mask]
        cdist = dist[mask]
        if len(cand) < min_nb:
            raise ValueError("not enough neighbors")
        r = np.sort(cdist)[min_nb - 1]
        nb = cand[cdist <= r + tie_tol]
        z_i = x[i:i + d * m:m]
        X = np.stack([x[j:j + d * m:m] for j in nb]) - z_i
        y = x[nb + d * m] - x[i + d * m]
        if not np.any(X):
            # degenerate neighbourhood: minimum-norm least-squares solution
            a = np.zeros(d)
        else:
            gram = X.T @ X
            rhs = X.T @ y
            if gram_is_singular(gram):
                lam = RIDGE_SCALE * np.trace(gram) / d
                a = np.linalg.solve(gram + lam * np.eye(d), rhs)
            else:
                a = np.linalg.solve(gram, rhs)
        T = np.zeros((d, d))
        T[np.arange(d - 1), np.arange(1, d)] = 1.0
        T[d - 1] = a
        Q, R = householder_qr(T @ q_prev)
        q_prev = Q
        sums += np.log(np.maximum(np.diag(R), EPS_FLOOR))
        k_steps += 1
    return sums / (k_steps * m * tau), k_steps


def read_idx_images(path):
    raw = open(path, "rb").read()
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    assert magic == 0x803
    px = np.frombuffer(raw[16:], dtype=np.uint8).astype(np.float64) / 255.0
    return px.reshape(count, rows * cols)


def main():
    cmd = sys.argv[1]
    if cmd == "random-golden":
        out = []
        for seed in range(1, 11):
            ex, k = lyap_e(uniform_series(seed, 784))
            out.append({"seed": seed, "n_steps": k, "exponents": [float(v) for v in ex]})
        json.dump(out, sys.stdout, indent=2)
    elif cmd == "mnist-golden":
        imgs = read_idx_images(sys.argv[2])
        index = int(sys.argv[3]) if len(sys.argv) > 3 else 5
        ex, k = lyap_e(imgs[index])
        json.dump({"index": index, "n_steps": k, "exponents": [float(v) for v in ex]}, sys.stdout, indent=2)
    else:
        raise SystemExit("unknown command")


if __name__ == "__main__":
    main()
