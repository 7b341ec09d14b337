"""Small causal recurrent model with 12 signal heads, written directly in numpy.

Layout: per-channel input projection (tanh) -> concatenation -> single-layer
GRU -> heads.  Sparse signals (EOT, HOLD, BOT, BC) get two-layer GELU heads,
dense ones (VAD, FVAD) linear heads.  An optional generative head predicts the
next frame's activity on both channels; it exists for pretraining and for the
auxiliary-loss ablation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..signals import N_SIGNALS, SPARSE_SIGNALS, column
from ..timeline import CHANNELS
from .losses import sigmoid

GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    t = np.tanh(GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)


@dataclass(frozen=True)
class ModelConfig:
    features_per_channel: int = 6
    proj_dim: int = 16
    hidden: int = 64
    head_hidden: int = 32
    sparse_bias_init: float = -3.0
    seed: int = 0


@dataclass(frozen=True)
class HeadSpec:
    name: str
    channel: str
    kind: str        # "mlp" or "linear"
    columns: tuple[int, ...]

    @property
    def n_outputs(self) -> int:
        return len(self.columns)


def head_specs() -> list[HeadSpec]:
    specs = []
    for ch in CHANNELS:
        for s in SPARSE_SIGNALS:
            specs.append(HeadSpec(s, ch, "mlp", (column(s, ch),)))
        specs.append(HeadSpec("vad", ch, "linear", (column("vad", ch),)))
        specs.append(HeadSpec("fvad", ch, "linear", tuple(column(f"fvad{k}", ch) for k in range(4))))
    return specs


SPARSE_HEADS = [h for h in head_specs() if h.kind == "mlp"]
DENSE_HEADS = [h for h in head_specs() if h.kind == "linear"]
SPARSE_COLS = np.array([h.columns[0] for h in SPARSE_HEADS])
DENSE_COLS = np.array([c for h in DENSE_HEADS for c in h.columns])


class SequenceModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), with_generative_head: bool = True):
        self.cfg = cfg
        self.params: dict[str, np.ndarray] = {}
        self.stage = "init"
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        F, P, H, M = cfg.features_per_channel, cfg.proj_dim, cfg.hidden, cfg.head_hidden

        def dense(fan_in, *shape):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        for ch in CHANNELS:
            self.params[f"proj_{ch}_W"] = dense(F, F, P)
            self.params[f"proj_{ch}_b"] = np.zeros(P)
        self.params["gru_W"] = dense(2 * P, 2 * P, 3 * H)
        self.params["gru_U"] = dense(H, H, 3 * H)
        self.params["gru_b"] = np.zeros(3 * H)
        for h in SPARSE_HEADS:
            key = f"head_{h.name}_{h.channel}"
            self.params[key + "_W1"] = dense(H, H, M)
            self.params[key + "_b1"] = np.zeros(M)
            self.params[key + "_W2"] = dense(M, M)
            self.params[key + "_b2"] = np.full(1, cfg.sparse_bias_init)
        for h in DENSE_HEADS:
            key = f"head_{h.name}_{h.channel}"
            self.params[key + "_W"] = dense(H, H, h.n_outputs)
            self.params[key + "_b"] = np.zeros(h.n_outputs)
        if with_generative_head:
            self.add_generative_head(rng)

    # -- structure ---------------------------------------------------------

    @property
    def has_generative_head(self) -> bool:
        return "gen_W" in self.params

    def add_generative_head(self, rng=None) -> None:
        rng = rng or np.random.Generator(np.random.PCG64(self.cfg.seed + 1))
        H = self.cfg.hidden
        self.params["gen_W"] = rng.normal(0.0, 1.0 / np.sqrt(H), size=(H, 2))
        self.params["gen_b"] = np.zeros(2)

    def drop_generative_head(self) -> None:
        self.params.pop("gen_W", None)
        self.params.pop("gen_b", None)

    def heads(self) -> list[HeadSpec]:
        return head_specs()

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(("proj_", "gru_"))]

    def copy(self) -> "SequenceModel":
        m = SequenceModel.__new__(SequenceModel)
        m.cfg = self.cfg
        m.stage = self.stage
        m.params = {k: v.copy() for k, v in self.params.items()}
        return m

    def zero_heads(self) -> None:
        for k in self.params:
            if k.startswith("head_"):
                self.params[k][...] = 0.0

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype=np.float64).tobytes())
        return h.hexdigest()

    # -- stacked head weights ---------------------------------------------

    def _sparse_stack(self):
        keys = [f"head_{h.name}_{h.channel}" for h in SPARSE_HEADS]
        W1 = np.concatenate([self.params[k + "_W1"] for k in keys], axis=1)
        b1 = np.concatenate([self.params[k + "_b1"] for k in keys])
        W2 = np.stack([self.params[k + "_W2"] for k in keys])
        b2 = np.concatenate([self.params[k + "_b2"] for k in keys])
        return keys, W1, b1, W2, b2

    def _dense_stack(self):
        keys = [f"head_{h.name}_{h.channel}" for h in DENSE_HEADS]
        W = np.concatenate([self.params[k + "_W"] for k in keys], axis=1)
        b = np.concatenate([self.params[k + "_b"] for k in keys])
        return keys, W, b

    def _check_dim(self, x):
        want = 2 * self.cfg.features_per_channel
        if x.shape[-1] != want:
            raise ValueError(f"feature dimension {x.shape[-1]} does not match model ({want})")

    # -- batched training path -------------------------------------------

    def forward(self, X: np.ndarray):
        """Batched forward over ``X`` of shape (B, T, 2F).

        Returns (logits (B, T, 18), generative logits (B, T, 2) or None, cache).
        """
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        self._check_dim(X)
        p = self.params
        F, H = self.cfg.features_per_channel, self.cfg.hidden
        B, T, _ = X.shape
        xa, xb = X[..., :F], X[..., F:]
        pa = np.tanh(xa @ p["proj_A_W"] + p["proj_A_b"])
        pb = np.tanh(xb @ p["proj_B_W"] + p["proj_B_b"])
        u = np.concatenate([pa, pb], axis=-1)
        A = u @ p["gru_W"] + p["gru_b"]
        U = p["gru_U"]
        h = np.zeros((B, H))
        Hs = np.empty((B, T, H))
        Z = np.empty((B, T, H))
        R = np.empty((B, T, H))
        N = np.empty((B, T, H))
        HN = np.empty((B, T, H))
        for t in range(T):
            hU = h @ U
            zr = sigmoid(A[:, t, :2 * H] + hU[:, :2 * H])
            z, r = zr[:, :H], zr[:, H:]
            hn = hU[:, 2 * H:]
            n = np.tanh(A[:, t, 2 * H:] + r * hn)
            h = (1.0 - z) * n + z * h
            Hs[:, t], Z[:, t], R[:, t], N[:, t], HN[:, t] = h, z, r, n, hn
        logits, gen, head_cache = self._heads(Hs.reshape(B * T, H))
        cache = dict(X=X, pa=pa, pb=pb, u=u, Hs=Hs, Z=Z, R=R, N=N, HN=HN, head=head_cache, shape=(B, T))
        return logits.reshape(B, T, N_SIGNALS), (None if gen is None else gen.reshape(B, T, 2)), cache

    def _heads(self, Hf):
        _, W1, b1, W2, b2 = self._sparse_stack()
        _, Wd, bd = self._dense_stack()
        n_sp, M = W2.shape
        G = Hf @ W1 + b1
        act, tg = gelu(G)
        sparse = np.einsum("nkm,km->nk", act.reshape(-1, n_sp, M), W2) + b2
        dense = Hf @ Wd + bd
        logits = np.empty((Hf.shape[0], N_SIGNALS))
        logits[:, SPARSE_COLS] = sparse
        logits[:, DENSE_COLS] = dense
        gen = Hf @ self.params["gen_W"] + self.params["gen_b"] if self.has_generative_head else None
        return logits, gen, dict(Hf=Hf, G=G, act=act, tg=tg)

    def backward(self, cache, dlogits, dgen=None, backbone: bool = True) -> dict[str, np.ndarray]:
        p = self.params
        F, H = self.cfg.features_per_channel, self.cfg.hidden
        B, T = cache["shape"]
        hc = cache["head"]
        Hf = hc["Hf"]
        dl = dlogits.reshape(B * T, N_SIGNALS)
        grads: dict[str, np.ndarray] = {}

        sp_keys, W1, b1, W2, b2 = self._sparse_stack()
        n_sp, M = W2.shape
        dsp = dl[:, SPARSE_COLS]                              # (BT, 8)
        act = hc["act"].reshape(-1, n_sp, M)
        dW2 = np.einsum("nk,nkm->km", dsp, act)
        db2 = dsp.sum(0)
        dact = (dsp[:, :, None] * W2[None]).reshape(-1, n_sp * M)
        dG = dact * gelu_grad(hc["G"], hc["tg"])
        dW1 = Hf.T @ dG
        db1 = dG.sum(0)
        dHf = dG @ W1.T
        for i, k in enumerate(sp_keys):
            grads[k + "_W1"] = dW1[:, i * M:(i + 1) * M]
            grads[k + "_b1"] = db1[i * M:(i + 1) * M]
            grads[k + "_W2"] = dW2[i]
            grads[k + "_b2"] = db2[i:i + 1]

        d_keys, Wd, bd = self._dense_stack()
        dd = dl[:, DENSE_COLS]
        dWd = Hf.T @ dd
        dbd = dd.sum(0)
        dHf += dd @ Wd.T
        start = 0
        for k, h in zip(d_keys, DENSE_HEADS):
            grads[k + "_W"] = dWd[:, start:start + h.n_outputs]
            grads[k + "_b"] = dbd[start:start + h.n_outputs]
            start += h.n_outputs

        if self.has_generative_head:
            if dgen is None:
                grads["gen_W"] = np.zeros_like(p["gen_W"])
                grads["gen_b"] = np.zeros_like(p["gen_b"])
            else:
                dg = dgen.reshape(B * T, 2)
                grads["gen_W"] = Hf.T @ dg
                grads["gen_b"] = dg.sum(0)
                dHf += dg @ p["gen_W"].T

        if not backbone:
            return grads

        dHs = dHf.reshape(B, T, H)
        U = p["gru_U"]
        Hs, Z, R, N, HN = cache["Hs"], cache["Z"], cache["R"], cache["N"], cache["HN"]
        dA = np.empty((B, T, 3 * H))
        dU = np.zeros_like(U)
        dh_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dHs[:, t] + dh_next
            z, r, n, hn = Z[:, t], R[:, t], N[:, t], HN[:, t]
            hp = Hs[:, t - 1] if t > 0 else np.zeros((B, H))
            dn = dh * (1.0 - z)
            dz = dh * (hp - n)
            dan = dn * (1.0 - n * n)
            dr = dan * hn
            dz_pre = dz * z * (1.0 - z)
            dr_pre = dr * r * (1.0 - r)
            dA[:, t, :H] = dz_pre
            dA[:, t, H:2 * H] = dr_pre
            dA[:, t, 2 * H:] = dan
            dhU = np.concatenate([dz_pre, dr_pre, dan * r], axis=1)
            dU += hp.T @ dhU
            dh_next = dh * z + dhU @ U.T
        dAf = dA.reshape(B * T, 3 * H)
        uf = cache["u"].reshape(B * T, -1)
        grads["gru_U"] = dU
        grads["gru_W"] = uf.T @ dAf
        grads["gru_b"] = dAf.sum(0)
        du = (dAf @ p["gru_W"].T).reshape(B, T, -1)
        P = self.cfg.proj_dim
        X = cache["X"]
        for ch, pc, sl, xs in (("A", cache["pa"], slice(0, P), X[..., :F]), ("B", cache["pb"], slice(P, 2 * P), X[..., F:])):
            dpre = (du[..., sl] * (1.0 - pc * pc)).reshape(B * T, P)
            grads[f"proj_{ch}_W"] = xs.reshape(B * T, F).T @ dpre
            grads[f"proj_{ch}_b"] = dpre.sum(0)
        return grads

    # -- per-frame inference path ------------------------------------------

    def initial_state(self) -> np.ndarray:
        return np.zeros((1, self.cfg.hidden))

    def step(self, x: np.ndarray, h: np.ndarray):
        """Advance one frame: ``x`` (2F,), ``h`` (1, H) -> (logits (18,), gen (2,) or None, h)."""
        p = self.params
        F, H = self.cfg.features_per_channel, self.cfg.hidden
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        self._check_dim(x)
        pa = np.tanh(x[:, :F] @ p["proj_A_W"] + p["proj_A_b"])
        pb = np.tanh(x[:, F:] @ p["proj_B_W"] + p["proj_B_b"])
        a = np.concatenate([pa, pb], axis=1) @ p["gru_W"] + p["gru_b"]
        hU = h @ p["gru_U"]
        zr = sigmoid(a[:, :2 * H] + hU[:, :2 * H])
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(a[:, 2 * H:] + r * hU[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        logits, gen, _ = self._heads(h)
        return logits[0], (None if gen is None else gen[0]), h

    def run(self, features: np.ndarray, h: np.ndarray | None = None):
        """Frame-by-frame pass over one session's (T, 2F) features.

        Returns (probabilities (T, 18), generative probabilities (T, 2) or None, final state).
        """
        features = np.asarray(features, dtype=np.float64)
        self._check_dim(features)
        h = self.initial_state() if h is None else h
        T = features.shape[0]
        out = np.empty((T, N_SIGNALS))
        gen = np.empty((T, 2)) if self.has_generative_head else None
        for t in range(T):
            logits, g, h = self.step(features[t], h)
            out[t] = logits
            if gen is not None:
                gen[t] = g
        return sigmoid(out), (None if gen is None else sigmoid(gen)), h
