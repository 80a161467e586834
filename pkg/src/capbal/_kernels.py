"""Hot numeric kernels.

Each kernel has a numba implementation and a vectorised numpy one with the
same signature. The numba path is used when numba imports cleanly and the
``BBIO_NO_NUMBA`` environment variable is unset (or ``0``). Both paths are
importable directly for cross-checking and benchmarking.

Array conventions: ``W`` is (n_actions, n_features); ``Xs`` stacks the
per-capability feature matrices as (n_caps, n_tasks, n_features) and ``Rs``
the matching composite reward tables as (n_caps, n_tasks, n_actions).
"""

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _env_flag(name):
    return os.environ.get(name, "").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and not _env_flag("BBIO_NO_NUMBA")
BACKEND = "numba" if USE_NUMBA else "numpy"

_TINY = 1e-300


# ---------------------------------------------------------------- numpy path


def _np_softmax(L):
    L = L - L.max(axis=-1, keepdims=True)
    P = np.exp(L)
    P /= P.sum(axis=-1, keepdims=True)
    return P


def np_objective_grad(W, X, R):
    P = _np_softmax(X @ W.T)
    v = (P * R).sum(axis=1)
    C = P * (R - v[:, None])
    return v.mean(), (C.T @ X) / X.shape[0]


def np_caps_grads(W, Xs, Rs):
    P = _np_softmax(np.einsum("ctf,af->cta", Xs, W))
    v = (P * Rs).sum(axis=2)
    C = P * (Rs - v[:, :, None])
    G = np.einsum("cta,ctf->caf", C, Xs) / Xs.shape[1]
    return v.mean(axis=1), G.reshape(Xs.shape[0], -1)


def _np_hinge_batch(G, eps, tol):
    # G: (B, n_caps, n) -> (B,)
    norms = np.sqrt((G * G).sum(axis=2))
    out = np.zeros(G.shape[0])
    n_caps = G.shape[1]
    for i in range(n_caps):
        for j in range(i + 1, n_caps):
            denom = norms[:, i] * norms[:, j]
            ok = (norms[:, i] > tol) & (norms[:, j] > tol)
            c = np.where(ok, (G[:, i] * G[:, j]).sum(axis=1) / np.where(ok, denom, 1.0), 0.0)
            out += np.maximum(0.0, c - eps) ** 2
    return out


def np_conflict_penalty(W, Xs, Rs, eps, tol):
    _, G = np_caps_grads(W, Xs, Rs)
    return float(_np_hinge_batch(G[None], eps, tol)[0])


def np_conflict_penalty_grad(W, Xs, Rs, eps, tol, h):
    A, F = W.shape
    n = A * F
    base = W.reshape(-1)
    steps = np.concatenate([np.eye(n) * h, -np.eye(n) * h])
    Ws = (base[None, :] + steps).reshape(2 * n, A, F)
    P = _np_softmax(np.einsum("ctf,baf->bcta", Xs, Ws))
    v = (P * Rs[None]).sum(axis=3)
    C = P * (Rs[None] - v[..., None])
    G = np.einsum("bcta,ctf->bcaf", C, Xs).reshape(2 * n, Xs.shape[0], n) / Xs.shape[1]
    pen = _np_hinge_batch(G, eps, tol)
    return (pen[:n] - pen[n:]) / (2.0 * h)


def np_policy_gradient(W, X, actions, coef):
    P = _np_softmax(X @ W.T)
    E = -P * coef[:, None]
    E[np.arange(len(actions)), actions] += coef
    return (E.T @ X) / X.shape[0]


# ---------------------------------------------------------------- numba path

if _HAVE_NUMBA:
    _njit = numba.njit(cache=True, fastmath=False)

    @_njit
    def _nb_row_softmax(W, x, out):
        A, F = W.shape
        m = -np.inf
        for a in range(A):
            s = 0.0
            for f in range(F):
                s += W[a, f] * x[f]
            out[a] = s
            if s > m:
                m = s
        z = 0.0
        for a in range(A):
            out[a] = np.exp(out[a] - m)
            z += out[a]
        for a in range(A):
            out[a] /= z

    @_njit
    def _nb_objective_grad_into(W, X, R, G):
        A, F = W.shape
        T = X.shape[0]
        p = np.empty(A)
        total = 0.0
        G[:, :] = 0.0
        for t in range(T):
            _nb_row_softmax(W, X[t], p)
            v = 0.0
            for a in range(A):
                v += p[a] * R[t, a]
            total += v
            for a in range(A):
                c = p[a] * (R[t, a] - v)
                if c != 0.0:
                    for f in range(F):
                        G[a, f] += c * X[t, f]
        for a in range(A):
            for f in range(F):
                G[a, f] /= T
        return total / T

    @_njit
    def nb_objective_grad(W, X, R):
        G = np.empty(W.shape)
        v = _nb_objective_grad_into(W, X, R, G)
        return v, G

    @_njit
    def nb_caps_grads(W, Xs, Rs):
        K = Xs.shape[0]
        A, F = W.shape
        vals = np.empty(K)
        out = np.empty((K, A * F))
        G = np.empty((A, F))
        for c in range(K):
            vals[c] = _nb_objective_grad_into(W, Xs[c], Rs[c], G)
            out[c] = G.reshape(-1)
        return vals, out

    @_njit
    def _nb_hinge(G, eps, tol):
        K, n = G.shape
        norms = np.empty(K)
        for i in range(K):
            s = 0.0
            for k in range(n):
                s += G[i, k] * G[i, k]
            norms[i] = np.sqrt(s)
        total = 0.0
        for i in range(K):
            for j in range(i + 1, K):
                if norms[i] <= tol or norms[j] <= tol:
                    continue
                d = 0.0
                for k in range(n):
                    d += G[i, k] * G[j, k]
                c = d / (norms[i] * norms[j]) - eps
                if c > 0.0:
                    total += c * c
        return total

    @_njit
    def nb_conflict_penalty(W, Xs, Rs, eps, tol):
        _, G = nb_caps_grads(W, Xs, Rs)
        return _nb_hinge(G, eps, tol)

    @_njit
    def nb_conflict_penalty_grad(W, Xs, Rs, eps, tol, h):
        A, F = W.shape
        n = A * F
        Wp = W.copy()
        flat = Wp.reshape(-1)
        out = np.empty(n)
        for k in range(n):
            orig = flat[k]
            flat[k] = orig + h
            _, G = nb_caps_grads(Wp, Xs, Rs)
            up = _nb_hinge(G, eps, tol)
            flat[k] = orig - h
            _, G = nb_caps_grads(Wp, Xs, Rs)
            dn = _nb_hinge(G, eps, tol)
            flat[k] = orig
            out[k] = (up - dn) / (2.0 * h)
        return out

    @_njit
    def nb_policy_gradient(W, X, actions, coef):
        A, F = W.shape
        n = X.shape[0]
        G = np.zeros((A, F))
        p = np.empty(A)
        for t in range(n):
            _nb_row_softmax(W, X[t], p)
            for a in range(A):
                e = -p[a]
                if a == actions[t]:
                    e += 1.0
                e *= coef[t]
                for f in range(F):
                    G[a, f] += e * X[t, f]
        for a in range(A):
            for f in range(F):
                G[a, f] /= n
        return G


NUMPY_IMPL = {
    "objective_grad": np_objective_grad,
    "caps_grads": np_caps_grads,
    "conflict_penalty": np_conflict_penalty,
    "conflict_penalty_grad": np_conflict_penalty_grad,
    "policy_gradient": np_policy_gradient,
}

NUMBA_IMPL = (
    {
        "objective_grad": nb_objective_grad,
        "caps_grads": nb_caps_grads,
        "conflict_penalty": nb_conflict_penalty,
        "conflict_penalty_grad": nb_conflict_penalty_grad,
        "policy_gradient": nb_policy_gradient,
    }
    if _HAVE_NUMBA
    else {}
)

_ACTIVE = NUMBA_IMPL if USE_NUMBA else NUMPY_IMPL

objective_grad = _ACTIVE["objective_grad"]
caps_grads = _ACTIVE["caps_grads"]
conflict_penalty = _ACTIVE["conflict_penalty"]
conflict_penalty_grad = _ACTIVE["conflict_penalty_grad"]
policy_gradient = _ACTIVE["policy_gradient"]
