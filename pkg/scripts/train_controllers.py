"""Train the bundled benchmark controllers by imitating an LQR law.

Networks are bias-free so the closed-loop equilibrium stays at the origin.
Tanh networks get a penalty on large pre-activations and on deviation of the
hidden layers from the identity, which keeps them in the near-linear regime
where single-sector bounds are tight. Output is deterministic for a seed.

    python3 scripts/train_controllers.py --out benchmarks
"""

import argparse
import json
from pathlib import Path

import numpy as np
from scipy.linalg import solve_continuous_are

G, M, L, MU = 9.81, 0.15, 0.5, 0.5


def lqr(A, B, Q, R):
    P = solve_continuous_are(A, B, Q, R)
    return np.linalg.solve(R, B.T @ P)


def act(kind, v):
    return np.maximum(v, 0.0) if kind == "relu" else np.tanh(v)


def dact(kind, v, x):
    return (v > 0).astype(float) if kind == "relu" else 1.0 - x * x


def forward(Ws, Z, kind):
    xs, vs = [Z], []
    x = Z
    for W in Ws[:-1]:
        v = x @ W.T
        x = act(kind, v)
        vs.append(v)
        xs.append(x)
    return x @ Ws[-1].T, xs, vs


def train(kind, hidden, K, lo, hi, seed, steps=4000, lr=3e-3, v_cap=0.5, lam_cap=10.0, lam_id=1e-2,
          n_samples=4096):
    rng = np.random.default_rng(seed)
    n = len(lo)
    sizes = [n] + hidden + [K.shape[0]]
    Ws = []
    for k in range(len(sizes) - 1):
        a, b = sizes[k], sizes[k + 1]
        if kind == "tanh" and 0 < k < len(sizes) - 2 and a == b:
            W = np.eye(b) + 0.1 * rng.normal(size=(b, a))
        else:
            W = rng.normal(size=(b, a)) / np.sqrt(a)
        Ws.append(W)
    if kind == "tanh":
        scale = v_cap / np.max(np.abs(np.hstack([lo[:, None], hi[:, None]]))) / np.sqrt(n)
        Ws[0] *= scale
    Z = rng.uniform(lo, hi, size=(n_samples, n))
    target = -Z @ K.T
    m = [np.zeros_like(W) for W in Ws]
    s = [np.zeros_like(W) for W in Ws]
    b1, b2 = 0.9, 0.999
    for it in range(1, steps + 1):
        out, xs, vs = forward(Ws, Z, kind)
        err = out - target
        grads = [None] * len(Ws)
        delta = 2 * err / len(Z)
        grads[-1] = delta.T @ xs[-1]
        back = delta @ Ws[-1]
        for k in range(len(Ws) - 2, -1, -1):
            dv = back * dact(kind, vs[k], xs[k + 1])
            if kind == "tanh":
                over = np.maximum(np.abs(vs[k]) - v_cap, 0.0) * np.sign(vs[k])
                dv = dv + lam_cap * 2 * over / len(Z)
            grads[k] = dv.T @ xs[k]
            back = dv @ Ws[k]
        for k in range(len(Ws)):
            if kind == "tanh" and 0 < k < len(Ws) - 1 and Ws[k].shape[0] == Ws[k].shape[1]:
                grads[k] = grads[k] + lam_id * 2 * (Ws[k] - np.eye(Ws[k].shape[0]))
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            s[k] = b2 * s[k] + (1 - b2) * grads[k] ** 2
            mh = m[k] / (1 - b1 ** it)
            sh = s[k] / (1 - b2 ** it)
            Ws[k] = Ws[k] - lr * mh / (np.sqrt(sh) + 1e-8)
    out, _, vs = forward(Ws, Z, kind)
    rmse = float(np.sqrt(np.mean((out - target) ** 2)))
    vmax = float(max(np.abs(v).max() for v in vs))
    return Ws, rmse, vmax


def save(path, Ws, kind, meta):
    d = {
        "activation": kind,
        "layers": [{"W": np.round(W, 12).tolist(), "b": [0.0] * W.shape[0]} for W in Ws],
        "training": meta,
    }
    Path(path).write_text(json.dumps(d, indent=1) + "\n")


def systems():
    out = {}
    A = np.array([[0.0, 1.0], [-1.0, -1.0]])
    B = np.array([[0.0], [1.0]])
    out["duffing"] = dict(kind="relu", hidden=[2, 2], A=A, B=B, Q=np.eye(2), R=np.eye(1),
                          lo=np.array([-3.0, -3.0]), hi=np.array([3.0, 3.0]))
    A = np.array([[-1.0, 1.0, -1.0], [-1.0, -1.0, 0.0], [-1.0, 0.0, 0.0]])
    B = np.array([[0.0], [0.0], [1.0]])
    out["three_state"] = dict(kind="tanh", hidden=[5] * 5, A=A, B=B, Q=np.eye(3), R=np.eye(1),
                              lo=np.full(3, -3.0), hi=np.full(3, 3.0))
    A = np.array([[0.0, 1.0], [G / L, -MU / (M * L * L)]])
    B = np.array([[0.0], [1.0 / (M * L * L)]])
    out["pendulum"] = dict(kind="tanh", hidden=[5] * 5, A=A, B=B, Q=np.diag([4.0, 0.1]), R=np.eye(1),
                           lo=np.array([-0.3, -1.4]), hi=np.array([0.3, 1.4]))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="benchmarks")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--restarts", type=int, default=5, help="random restarts; the best fit is kept")
    ap.add_argument("--only", nargs="*")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, cfg in systems().items():
        if args.only and name not in args.only:
            continue
        K = lqr(cfg["A"], cfg["B"], cfg["Q"], cfg["R"])
        best = None
        for restart in range(args.restarts):
            seed = args.seed + restart
            Ws, rmse, vmax = train(cfg["kind"], cfg["hidden"], K, cfg["lo"], cfg["hi"], seed, args.steps)
            if best is None or rmse < best[1]:
                best = (Ws, rmse, vmax, seed)
        Ws, rmse, vmax, seed = best
        meta = {"method": "LQR imitation", "seed": seed, "steps": args.steps, "lqr_gain": K.tolist(),
                "box": [cfg["lo"].tolist(), cfg["hi"].tolist()], "rmse": rmse, "max_preactivation": vmax}
        save(out / f"{name}_nn.json", Ws, cfg["kind"], meta)
        print(f"{name}: K={np.round(K, 4).tolist()} rmse={rmse:.4g} max|v|={vmax:.3g}")


if __name__ == "__main__":
    main()
