"""Sequence-model pieces: GRU heads, cross-attention, MLP, losses, checkpoints.

Training runs on torch autograd in double precision. The ``np_*`` functions
are independent numpy forward passes of the same math; tests use them as the
reference for the torch modules.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
D_H = 32  # attention width
D_Z = 32  # compensation latent width
MLP_HIDDEN = 64

# feature -> (input dim, hidden dim, latent dim, layers)
AE_SPECS = {
    "slip": (4, 64, 16, 2),
    "foot_speed": (4, 64, 16, 2),
    "inekf": (18, 128, 32, 2),
    "error": (9, 128, 32, 2),
}


class ShapeMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


class ZeroVector(ValueError):
    pass


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFinite(f"{what} produced non-finite values")
    return x


def _uniform_(p: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * (2.0 * bound) - bound)


def _init_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    _uniform_(lin.weight, lin.in_features, gen)
    _uniform_(lin.bias, lin.in_features, gen)


class GRUHead(nn.Module):
    """Stacked GRU followed by a per-step linear map."""

    def __init__(self, d_in: int, hidden: int, d_out: int, layers: int = 2):
        super().__init__()
        if min(d_in, hidden, d_out, layers) <= 0:
            raise ValueError("GRU dims must be positive")
        self.d_in = d_in
        self.gru = nn.GRU(d_in, hidden, layers, batch_first=True, dtype=DTYPE)
        self.out = nn.Linear(hidden, d_out, dtype=DTYPE)

    def reset(self, gen: torch.Generator) -> None:
        g = self.gru
        for k in range(g.num_layers):
            fan = g.input_size if k == 0 else g.hidden_size
            _uniform_(getattr(g, f"weight_ih_l{k}"), fan, gen)
            _uniform_(getattr(g, f"bias_ih_l{k}"), fan, gen)
            _uniform_(getattr(g, f"weight_hh_l{k}"), g.hidden_size, gen)
            _uniform_(getattr(g, f"bias_hh_l{k}"), g.hidden_size, gen)
        _init_linear(self.out, gen)

    def forward(self, x: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeMismatch(f"expected {self.d_in} input channels, got {x.shape[-1]}")
        y, _ = self.gru(x, h0)
        return check_finite(self.out(check_finite(y, "gru")), "gru head")


def gru_forward(seq: torch.Tensor, gru: nn.GRU, h0: torch.Tensor | None = None) -> torch.Tensor:
    """Top-layer hidden sequence of a stacked GRU; ``h0`` defaults to zeros."""
    if seq.shape[-1] != gru.input_size:
        raise ShapeMismatch(f"expected {gru.input_size} input channels, got {seq.shape[-1]}")
    y, _ = gru(seq, h0)
    return check_finite(y, "gru")


class Autoencoder(nn.Module):
    def __init__(self, d_in: int, hidden: int, latent: int, layers: int = 2):
        super().__init__()
        self.encoder = GRUHead(d_in, hidden, latent, layers)
        self.decoder = GRUHead(latent, hidden, d_in, layers)

    @classmethod
    def for_feature(cls, feature: str) -> "Autoencoder":
        return cls(*AE_SPECS[feature])

    def reset(self, gen: torch.Generator) -> None:
        self.encoder.reset(gen)
        self.decoder.reset(gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention; queries from one sequence, keys/values from another."""

    def __init__(self, d_q: int, d_kv: int, d_h: int = D_H):
        super().__init__()
        self.d_h = d_h
        self.W_q = nn.Parameter(torch.zeros(d_q, d_h, dtype=DTYPE))
        self.W_k = nn.Parameter(torch.zeros(d_kv, d_h, dtype=DTYPE))
        self.W_v = nn.Parameter(torch.zeros(d_kv, d_h, dtype=DTYPE))

    def reset(self, gen: torch.Generator) -> None:
        for W in (self.W_q, self.W_k, self.W_v):
            _uniform_(W, W.shape[0], gen)

    def forward(self, z_q: torch.Tensor, z_kv: torch.Tensor) -> tuple:
        return cross_attention(z_q, z_kv, self.W_q, self.W_k, self.W_v)


def cross_attention(z_q, z_kv, W_q, W_k, W_v) -> tuple:
    """``(H_att, alpha)``; softmax runs over the key axis so each row of ``alpha`` sums to one."""
    if z_q.shape[:-1] != z_kv.shape[:-1]:
        raise ShapeMismatch(f"query history {tuple(z_q.shape)} vs key history {tuple(z_kv.shape)}")
    if z_q.shape[-1] != W_q.shape[0] or z_kv.shape[-1] != W_k.shape[0]:
        raise ShapeMismatch("latent width does not match the projection")
    q = z_q @ W_q
    k = z_kv @ W_k
    v = z_kv @ W_v
    logits = q @ k.transpose(-1, -2) / math.sqrt(W_q.shape[1])
    alpha = torch.softmax(logits, dim=-1)
    return check_finite(alpha @ v, "attention"), alpha


class MLP(nn.Module):
    def __init__(self, d_in: int, d_out: int = D_Z, hidden: int = MLP_HIDDEN):
        super().__init__()
        self.d_in = d_in
        self.hidden = nn.Linear(d_in, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, d_out, dtype=DTYPE)

    def reset(self, gen: torch.Generator) -> None:
        _init_linear(self.hidden, gen)
        _init_linear(self.out, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeMismatch(f"expected {self.d_in} features, got {x.shape[-1]}")
        return check_finite(self.out(torch.tanh(self.hidden(x))), "mlp")


def mlp_forward(x: torch.Tensor, mlp: MLP) -> torch.Tensor:
    return mlp(x)


# ---------------------------------------------------------------------------
# losses


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(1, -1) if x.dim() <= 2 else x.reshape(x.shape[0], -1)


def loss_latent(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """MSE + 0.1 (1 - cos) + 0.01 KL(softmax(z_hat) || softmax(z)).

    Cosine and KL act on each sample's flattened latent and are averaged over
    the batch (leading axis when the input has three or more dims).
    """
    if z.shape != z_hat.shape:
        raise ShapeMismatch(f"teacher {tuple(z.shape)} vs student {tuple(z_hat.shape)}")
    mse = torch.mean((z - z_hat) ** 2)
    a = _per_sample(z_hat)
    b = _per_sample(z)
    na = torch.linalg.vector_norm(a, dim=1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    if bool((na < 1e-12).any()) or bool((nb < 1e-12).any()):
        raise ZeroVector("cosine similarity of a zero latent")
    # 1 - cos(a, b) == |a/|a| - b/|b||^2 / 2, exactly zero when a == b
    one_minus_cos = 0.5 * torch.sum((a / na - b / nb) ** 2, dim=1)
    log_p = torch.log_softmax(a, dim=1)
    log_q = torch.log_softmax(b, dim=1)
    kl = torch.sum(torch.exp(log_p) * (log_p - log_q), dim=1)
    return check_finite(mse + 0.1 * one_minus_cos.mean() + 0.01 * kl.mean(), "latent loss")


def loss_state(e_pred: torch.Tensor, e_target: torch.Tensor, weights=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """``w_R |e_R|^2 + w_v |e_v|^2 + w_p |e_p|^2`` on the residual, averaged over leading axes."""
    if e_pred.shape != e_target.shape or e_pred.shape[-1] != 9:
        raise ShapeMismatch("state loss needs matching (..., 9) tensors")
    r = (e_pred - e_target).reshape(-1, 3, 3)
    blocks = torch.sum(r * r, dim=-1)  # (N, 3)
    w = torch.as_tensor(weights, dtype=DTYPE)
    return check_finite(torch.mean(blocks @ w), "state loss")


# ---------------------------------------------------------------------------
# numpy reference forward passes


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_layers(gru: nn.GRU) -> list:
    """Per-layer numpy weights ``{W_ih, W_hh, b_ih, b_hh}``; gate rows are ordered (r, z, n)."""
    return [
        {
            "W_ih": getattr(gru, f"weight_ih_l{k}").detach().numpy().copy(),
            "W_hh": getattr(gru, f"weight_hh_l{k}").detach().numpy().copy(),
            "b_ih": getattr(gru, f"bias_ih_l{k}").detach().numpy().copy(),
            "b_hh": getattr(gru, f"bias_hh_l{k}").detach().numpy().copy(),
        }
        for k in range(gru.num_layers)
    ]


def np_gru_forward(seq: np.ndarray, layers: list, h0: np.ndarray | None = None) -> np.ndarray:
    """Stacked GRU over ``seq`` (H, d) or (B, H, d); returns the top layer's hidden sequence."""
    x = np.asarray(seq, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, H, _ = x.shape
    for li, L in enumerate(layers):
        hid = L["W_hh"].shape[1]
        if x.shape[-1] != L["W_ih"].shape[1]:
            raise ShapeMismatch(f"layer {li} expects {L['W_ih'].shape[1]} inputs, got {x.shape[-1]}")
        h = np.zeros((B, hid)) if h0 is None else np.asarray(h0, dtype=float)[li].reshape(B, hid)
        gi_all = x @ L["W_ih"].T + L["b_ih"]
        out = np.empty((B, H, hid))
        for t in range(H):
            gi = gi_all[:, t]
            gh = h @ L["W_hh"].T + L["b_hh"]
            r = _sigmoid(gi[:, :hid] + gh[:, :hid])
            z = _sigmoid(gi[:, hid : 2 * hid] + gh[:, hid : 2 * hid])
            n = np.tanh(gi[:, 2 * hid :] + r * gh[:, 2 * hid :])
            h = (1.0 - z) * n + z * h
            out[:, t] = h
        x = out
    return x[0] if squeeze else x


def np_cross_attention(z_q, z_kv, W_q, W_k, W_v) -> tuple:
    q = np.asarray(z_q) @ W_q
    k = np.asarray(z_kv) @ W_k
    v = np.asarray(z_kv) @ W_v
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(W_q.shape[1])
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    alpha = w / w.sum(axis=-1, keepdims=True)
    return alpha @ v, alpha


def np_mlp_forward(x, layers: list) -> np.ndarray:
    """``layers`` is a list of ``(W, b, activation)`` with ``W`` shaped (out, in)."""
    y = np.asarray(x, dtype=float)
    for W, b, act in layers:
        y = y @ np.asarray(W).T + b
        if act == "tanh":
            y = np.tanh(y)
    return y


def np_loss_latent(z, z_hat) -> float:
    z = np.asarray(z, dtype=float)
    z_hat = np.asarray(z_hat, dtype=float)
    a = z_hat.reshape(1, -1) if z.ndim <= 2 else z_hat.reshape(z.shape[0], -1)
    b = z.reshape(a.shape)
    mse = np.mean((z - z_hat) ** 2)
    cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))

    def softmax(u):
        e = np.exp(u - u.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    p, q = softmax(a), softmax(b)
    kl = np.sum(p * np.log(p / q), axis=1)
    return float(mse + 0.1 * np.mean(1.0 - cos) + 0.01 * np.mean(kl))


# ---------------------------------------------------------------------------
# gradients and optimizer


def gradient_check(loss_fn, params: dict, per_group: int = 10, eps: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> dict:
    """Worst relative error between autograd and central differences, per named parameter.

    The error of one entry is ``|g - fd| / max(|g|, |fd|, floor)``; the floor
    keeps vanishing gradients from dividing FD round-off by zero.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
    worst = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(per_group, flat.numel()), replace=False)
            err = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                g = grads[name].view(-1)[i].item()
                err = max(err, abs(g - fd) / max(abs(g), abs(fd), floor))
            worst[name] = err
    return worst


def make_optimizer(groups, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(groups, lr=lr, betas=betas, eps=eps)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ANKFCKPT"
CKPT_VERSION = 1


def module_state(module: nn.Module, prefix: str = "") -> dict:
    return {prefix + n: t.detach().cpu().numpy().copy() for n, t in module.state_dict().items()}


def load_module_state(module: nn.Module, blocks: dict, prefix: str = "") -> None:
    state = {}
    for name, ref in module.state_dict().items():
        key = prefix + name
        if key not in blocks:
            raise KeyError(f"checkpoint lacks block {key!r}")
        a = np.asarray(blocks[key])
        if tuple(a.shape) != tuple(ref.shape):
            raise ShapeMismatch(f"block {key!r}: {a.shape} vs {tuple(ref.shape)}")
        state[name] = torch.from_numpy(a.copy())
    module.load_state_dict(state)


def save_checkpoint(path, blocks: dict, meta: dict) -> None:
    """Versioned header then named row-major little-endian float64 blocks."""
    names = sorted(blocks)
    head = json.dumps(
        {"meta": meta, "blocks": [[n, list(np.shape(blocks[n]))] for n in names]},
        sort_keys=True, allow_nan=False,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(head)))
        fh.write(head)
        for n in names:
            fh.write(np.ascontiguousarray(blocks[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    blob = Path(path).read_bytes()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", blob, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = len(CKPT_MAGIC) + 8
    head = json.loads(blob[off : off + hlen])
    off += hlen
    blocks = {}
    for name, shape in head["blocks"]:
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        blocks[name] = a.astype(float)
        off += 8 * n
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after the last block")
    return head["meta"], blocks
