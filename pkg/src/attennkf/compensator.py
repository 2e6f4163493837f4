"""Slip-conditioned neural compensator: data windows, two-stage training, inference.

Stage 1 fits one GRU autoencoder per input feature (slip, filter values,
state error). Stage 2 freezes the encoders and trains the attention/MLP
head plus the reused error decoder, pulling the head's latent toward the
error encoder's latent (teacher) while regressing the error itself.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from attennkf import filter as F
from attennkf.lie import exp_so3, log_so3
from attennkf.neural import (
    AE_SPECS,
    D_Z,
    DTYPE,
    Autoencoder,
    CrossAttention,
    GRUHead,
    MLP,
    ShapeMismatch,
    gradient_check,
    load_module_state,
    loss_latent,
    loss_state,
    make_optimizer,
    module_state,
)
from attennkf.slipsig import SlipParams
from attennkf.trace import FilterTrace, run_filter

HISTORY = 50
VARIANTS = ("Proposed", "NoAtten", "SelfAtten", "NoTeach", "EndToEnd", "RawFootVelocity", "ExplicitSlip")
FEATURE_DIMS = {"inekf": 18, "slip": 4, "foot_speed": 4, "error": 9}


class AlignmentError(ValueError):
    pass


class MissingStage1(RuntimeError):
    pass


class Diverged(RuntimeError):
    pass


def query_feature(variant: str) -> str | None:
    """Which windowed signal conditions the head: slip levels, foot speeds, or nothing."""
    if variant == "SelfAtten":
        return None
    return "foot_speed" if variant == "RawFootVelocity" else "slip"


def stage1_features(variant: str) -> tuple:
    q = query_feature(variant)
    if variant == "ExplicitSlip" or q is None:
        return ("inekf", "error")
    return ("inekf", q, "error")


@dataclass
class TrainingConfig:
    lambda_latent: float = 1.0
    lambda_state: float = 1.0
    w_rot: float = 1.0
    w_vel: float = 1.0
    w_pos: float = 1.0
    lr: float = 1e-3
    decoder_lr_scale: float = 0.1
    epochs_stage1: int = 10
    epochs_stage2: int = 25
    batch_size: int = 64
    seed: int = 0
    history: int = HISTORY
    stride: int = 100
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.history != HISTORY:
            raise ValueError(f"history must be {HISTORY}")
        for name in ("lambda_latent", "lambda_state", "w_rot", "w_vel", "w_pos"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr <= 0 or self.batch_size <= 0 or self.stride <= 0:
            raise ValueError("lr, batch_size and stride must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


# ---------------------------------------------------------------------------
# features and windows


def teacher_errors(trace: FilterTrace, episode) -> np.ndarray:
    """``[log(R_gt R^T), v_gt - v, p_gt - p]`` per frame, (T, 9)."""
    R, v, p = trace.trajectory()
    rot = np.array([log_so3(Rg @ Re.T) for Rg, Re in zip(episode.R, R)])
    return np.hstack([rot, episode.v - v, episode.p - p])


def frame_features(trace: FilterTrace, episode=None) -> dict:
    out = {
        "inekf": np.hstack([trace.xbar, trace.dx]),
        "slip": trace.slip,
        "foot_speed": trace.foot_speed,
    }
    if episode is not None:
        out["error"] = teacher_errors(trace, episode)
    return out


@dataclass
class Standardizer:
    mean: dict
    std: dict

    @classmethod
    def fit(cls, windows: dict) -> "Standardizer":
        mean, std = {}, {}
        for name, w in windows.items():
            flat = w.reshape(-1, w.shape[-1])
            mean[name] = flat.mean(axis=0)
            s = flat.std(axis=0)
            std[name] = np.where(s > 1e-12, s, 1.0)
        return cls(mean, std)

    def apply(self, name: str, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[name]) / self.std[name]

    def invert(self, name: str, x: np.ndarray) -> np.ndarray:
        return x * self.std[name] + self.mean[name]

    def blocks(self) -> dict:
        out = {}
        for name in self.mean:
            out[f"stats.{name}.mean"] = self.mean[name]
            out[f"stats.{name}.std"] = self.std[name]
        return out

    @classmethod
    def from_blocks(cls, blocks: dict) -> "Standardizer":
        names = sorted({k.split(".")[1] for k in blocks if k.startswith("stats.")})
        return cls(
            {n: np.asarray(blocks[f"stats.{n}.mean"]) for n in names},
            {n: np.asarray(blocks[f"stats.{n}.std"]) for n in names},
        )


@dataclass
class Windows:
    data: dict  # feature -> (N, H, d), standardized
    stats: Standardizer
    episode: np.ndarray  # (N,) source episode index
    end: np.ndarray  # (N,) last frame index of each window

    def __len__(self) -> int:
        return self.episode.shape[0]

    @property
    def target(self) -> np.ndarray:
        return self.data["error"][:, -1]

    def subset(self, idx) -> "Windows":
        return Windows({k: v[idx] for k, v in self.data.items()}, self.stats, self.episode[idx], self.end[idx])


def window_count(T: int, history: int, stride: int) -> int:
    return 0 if T < history else (T - history) // stride + 1


def build_dataset(episodes, traces, stride: int = 100, history: int = HISTORY, stats: Standardizer | None = None) -> Windows:
    """Sliding windows over every (episode, trace) pair, standardized per channel.

    Statistics are fitted on these windows unless ``stats`` is given (use the
    training set's statistics for validation/test data).
    """
    if len(episodes) != len(traces):
        raise AlignmentError(f"{len(episodes)} episodes vs {len(traces)} traces")
    raw = {n: [] for n in FEATURE_DIMS}
    ep_idx, ends = [], []
    for i, (ep, tr) in enumerate(zip(episodes, traces)):
        if len(ep) != len(tr) or not np.array_equal(ep.t, tr.t):
            raise AlignmentError(f"episode {i}: trace timestamps do not match the episode")
        feats = frame_features(tr, ep)
        n = window_count(len(ep), history, stride)
        starts = np.arange(n) * stride
        idx = starts[:, None] + np.arange(history)[None, :]
        for name in FEATURE_DIMS:
            raw[name].append(feats[name][idx])
        ep_idx.append(np.full(n, i))
        ends.append(starts + history - 1)
    raw = {n: np.concatenate(v) for n, v in raw.items()}
    stats = stats or Standardizer.fit(raw)
    data = {n: stats.apply(n, v) for n, v in raw.items()}
    return Windows(data, stats, np.concatenate(ep_idx), np.concatenate(ends))


# ---------------------------------------------------------------------------
# models


class AttenNC(nn.Module):
    """Encoders, slip-conditioned attention, MLP, and the compensation decoder.

    The ablation variants differ only in how the conditioning enters:
    ``NoAtten`` concatenates slip and filter latents into the MLP,
    ``SelfAtten`` attends the filter latent to itself, and ``ExplicitSlip``
    lifts the raw slip levels linearly in place of the slip encoder.
    """

    def __init__(self, variant: str, enc_inekf: GRUHead, enc_q: GRUHead | None, decoder: GRUHead):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.enc_inekf = enc_inekf
        d_inekf = AE_SPECS["inekf"][2]
        d_slip = AE_SPECS["slip"][2]
        self.enc_slip = None
        self.lift = None
        self.attention = None
        if variant == "SelfAtten":
            self.attention = CrossAttention(d_inekf, d_inekf)
            self.mlp = MLP(D_Z)
        elif variant == "NoAtten":
            self.enc_slip = enc_q
            self.mlp = MLP(d_slip + d_inekf)
        elif variant == "ExplicitSlip":
            self.lift = nn.Linear(4, d_slip, dtype=DTYPE)
            self.attention = CrossAttention(d_slip, d_inekf)
            self.mlp = MLP(D_Z)
        else:
            self.enc_slip = enc_q
            self.attention = CrossAttention(d_slip, d_inekf)
            self.mlp = MLP(D_Z)
        if self.enc_slip is None and variant not in ("SelfAtten", "ExplicitSlip"):
            raise MissingStage1(f"{variant} needs a slip encoder")
        self.decoder = decoder

    def head_modules(self) -> list:
        return [m for m in (self.lift, self.attention, self.mlp) if m is not None]

    def reset_head(self, gen: torch.Generator) -> None:
        for m in self.head_modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / np.sqrt(m.in_features)
                with torch.no_grad():
                    for p in (m.weight, m.bias):
                        p.copy_(torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
            else:
                m.reset(gen)

    def encode(self, inekf: torch.Tensor, q: torch.Tensor | None) -> tuple:
        z_inekf = self.enc_inekf(inekf)
        if self.enc_slip is not None:
            z_q = self.enc_slip(q)
        elif self.lift is not None:
            z_q = q  # lifted inside the head
        else:
            z_q = None
        return z_inekf, z_q

    def head(self, z_inekf: torch.Tensor, z_q: torch.Tensor | None) -> tuple:
        """``(z_comp, e_last, alpha)`` from encoder latents."""
        alpha = None
        if self.variant == "NoAtten":
            h = torch.cat([z_q, z_inekf], dim=-1)
        elif self.variant == "SelfAtten":
            h, alpha = self.attention(z_inekf, z_inekf)
        else:
            query = self.lift(z_q) if self.lift is not None else z_q
            h, alpha = self.attention(query, z_inekf)
        z_comp = self.mlp(h)
        e_last = self.decoder(z_comp)[:, -1, :]
        return z_comp, e_last, alpha

    def forward(self, inekf: torch.Tensor, q: torch.Tensor | None = None) -> tuple:
        return self.head(*self.encode(inekf, q))


def build_model(variant: str, stage1: dict | None, seed: int = 0) -> AttenNC:
    """Fresh AttenNC for ``variant``; encoders/decoder copied from stage-1 autoencoders.

    ``EndToEnd`` ignores stage 1 and starts every component from random weights.
    """
    gen = torch.Generator().manual_seed(seed)
    qf = query_feature(variant)
    if variant == "EndToEnd":
        enc_inekf = GRUHead(*_enc_dims("inekf"))
        enc_q = GRUHead(*_enc_dims(qf))
        decoder = GRUHead(*_dec_dims("error"))
        for m in (enc_inekf, enc_q, decoder):
            m.reset(gen)
    else:
        need = stage1_features(variant)
        missing = [f for f in need if not stage1 or f not in stage1]
        if missing:
            raise MissingStage1(f"{variant} needs stage-1 autoencoders for {missing}")
        enc_inekf = copy.deepcopy(stage1["inekf"].encoder)
        enc_q = copy.deepcopy(stage1[qf].encoder) if qf in need else None
        decoder = copy.deepcopy(stage1["error"].decoder)
    model = AttenNC(variant, enc_inekf, enc_q, decoder)
    model.reset_head(gen)
    return model


def _enc_dims(feature: str) -> tuple:
    d_in, hidden, latent, layers = AE_SPECS[feature]
    return d_in, hidden, latent, layers


def _dec_dims(feature: str) -> tuple:
    d_in, hidden, latent, layers = AE_SPECS[feature]
    return latent, hidden, d_in, layers


def variant_gradient_check(variant: str, seed: int = 0, per_group: int = 10, batch: int = 2, eps: float = 1e-4) -> dict:
    """Autograd vs central differences for every parameter tensor of a freshly built variant.

    The loss is the full stage-2 objective on random windows and a random
    teacher latent; frozen encoders are included so every group is covered.
    """
    gen = torch.Generator().manual_seed(seed)
    stage1 = {}
    for f in stage1_features(variant):
        ae = Autoencoder.for_feature(f)
        ae.reset(gen)
        stage1[f] = ae
    model = build_model(variant, None if variant == "EndToEnd" else stage1, seed)
    rng = np.random.default_rng(seed)
    inekf = _t(rng.standard_normal((batch, HISTORY, 18)))
    q = _t(rng.random((batch, HISTORY, 4))) if query_feature(variant) else None
    z_teacher = _t(rng.standard_normal((batch, HISTORY, D_Z)))
    target = _t(rng.standard_normal((batch, 9)))
    params = dict(model.named_parameters())
    for p in params.values():
        p.requires_grad_(True)

    def loss_fn():
        z_comp, e_last, _ = model(inekf, q)
        return loss_latent(z_teacher, z_comp) + loss_state(e_last, target)

    return gradient_check(loss_fn, params, per_group, eps, seed)


# ---------------------------------------------------------------------------
# training


def _t(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=float))


def _split(n: int, frac: float, seed: int) -> tuple:
    perm = np.random.default_rng([seed, 11]).permutation(n)
    n_val = int(round(n * frac))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        yield perm[i : i + size]


def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise Diverged(f"{what} became non-finite")
    return value


@dataclass
class Stage1Result:
    models: dict  # feature -> Autoencoder
    curves: dict  # feature -> [(epoch, train_mse)]
    final: dict  # feature -> (train_mse, val_mse)


def _reconstruction(ae: Autoencoder, x: torch.Tensor, batch: int = 512) -> float:
    with torch.no_grad():
        tot = 0.0
        for i in range(0, x.shape[0], batch):
            xb = x[i : i + batch]
            tot += float(torch.sum((ae(xb) - xb) ** 2))
        return tot / x.numel()


def train_stage1(windows: Windows, config: TrainingConfig, features=("slip", "inekf", "error"), log=None) -> Stage1Result:
    """Sequence-to-sequence autoencoders, one per feature, trained on MSE reconstruction."""
    config.validate()
    if len(windows) < 100:
        raise ValueError(f"stage 1 needs at least 100 windows, got {len(windows)}")
    tr_idx, va_idx = _split(len(windows), config.val_fraction, config.seed)
    models, curves, final = {}, {}, {}
    for fi, feature in enumerate(features):
        gen = torch.Generator().manual_seed(config.seed * 1000 + fi)
        rng = np.random.default_rng([config.seed, fi, 1])
        ae = Autoencoder.for_feature(feature)
        ae.reset(gen)
        x = _t(windows.data[feature][tr_idx])
        x_val = _t(windows.data[feature][va_idx])
        opt = make_optimizer(ae.parameters(), lr=config.lr)
        curve = [(0, _finite(_reconstruction(ae, x), f"{feature} reconstruction"))]
        for epoch in range(1, config.epochs_stage1 + 1):
            tot, count = 0.0, 0
            for b in _batches(x.shape[0], config.batch_size, rng):
                xb = x[b]
                opt.zero_grad()
                loss = torch.mean((ae(xb) - xb) ** 2)
                loss.backward()
                opt.step()
                tot += _finite(loss.item(), f"{feature} reconstruction") * len(b)
                count += len(b)
            curve.append((epoch, tot / count))
            if log:
                log(f"stage1 {feature} epoch {epoch} mse {tot / count:.5f}")
        for p in ae.parameters():
            p.requires_grad_(False)
        models[feature] = ae
        curves[feature] = curve
        val = _reconstruction(ae, x_val) if len(va_idx) else float("nan")
        final[feature] = (_reconstruction(ae, x), val)
    return Stage1Result(models, curves, final)


@dataclass
class Stage2Result:
    model: AttenNC
    curve: list  # (epoch, L_latent, L_state, L_total), weighted contributions
    stats: Standardizer
    variant: str
    config: TrainingConfig = field(default_factory=TrainingConfig)


def _query_data(windows: Windows, variant: str) -> np.ndarray | None:
    qf = query_feature(variant)
    return None if qf is None else windows.data[qf]


def train_stage2(windows: Windows, stage1: dict | None, config: TrainingConfig, variant: str = "Proposed", log=None) -> Stage2Result:
    """Distill the teacher latent into the attention head and fine-tune the decoder.

    Frozen encoder latents are computed once up front. ``EndToEnd`` trains
    everything jointly from scratch and still uses the frozen teacher when one
    is available; without stage 1 it trains on the state loss alone.
    """
    config.validate()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    lam_latent = 0.0 if variant == "NoTeach" else config.lambda_latent
    teacher = stage1.get("error").encoder if stage1 and "error" in stage1 else None
    if teacher is None and variant != "EndToEnd":
        raise MissingStage1("stage 2 needs the stage-1 error encoder as teacher")
    if teacher is None:
        lam_latent = 0.0

    model = build_model(variant, stage1, seed=config.seed)
    joint = variant == "EndToEnd"
    inekf = _t(windows.data["inekf"])
    qd = _query_data(windows, variant)
    q = None if qd is None else _t(qd)
    target = _t(windows.target)
    with torch.no_grad():
        z_teacher = teacher(_t(windows.data["error"])) if teacher is not None else None
        if not joint:
            for p in list(model.enc_inekf.parameters()) + (list(model.enc_slip.parameters()) if model.enc_slip else []):
                p.requires_grad_(False)
            z_inekf_all, z_q_all = model.encode(inekf, q)

    head_params = [p for m in model.head_modules() for p in m.parameters()]
    if joint:
        groups = [{"params": [p for p in model.parameters()], "lr": config.lr}]
    else:
        groups = [
            {"params": head_params, "lr": config.lr},
            {"params": list(model.decoder.parameters()), "lr": config.lr * config.decoder_lr_scale},
        ]
    opt = make_optimizer(groups, lr=config.lr)
    weights = (config.w_rot, config.w_vel, config.w_pos)
    rng = np.random.default_rng([config.seed, 2])

    def batch_loss(b):
        if joint:
            z_inekf, z_q = model.encode(inekf[b], None if q is None else q[b])
        else:
            z_inekf = z_inekf_all[b]
            z_q = None if z_q_all is None else z_q_all[b]
        z_comp, e_last, _ = model.head(z_inekf, z_q)
        l_state = config.lambda_state * loss_state(e_last, target[b], weights)
        if lam_latent > 0.0:
            l_lat = lam_latent * loss_latent(z_teacher[b], z_comp)
        else:
            l_lat = torch.zeros((), dtype=DTYPE)
        return l_lat, l_state

    n = len(windows)
    with torch.no_grad():
        tots = np.zeros(2)
        for i in range(0, n, 512):
            b = np.arange(i, min(n, i + 512))
            l_lat, l_state = batch_loss(b)
            tots += np.array([l_lat.item(), l_state.item()]) * len(b)
        tots /= n
    curve = [(0, tots[0], tots[1], _finite(tots.sum(), "stage-2 loss"))]
    for epoch in range(1, config.epochs_stage2 + 1):
        tots = np.zeros(2)
        for b in _batches(n, config.batch_size, rng):
            opt.zero_grad()
            l_lat, l_state = batch_loss(b)
            loss = l_lat + l_state
            loss.backward()
            opt.step()
            tots += np.array([l_lat.item(), l_state.item()]) * len(b)
        tots /= n
        curve.append((epoch, tots[0], tots[1], _finite(tots.sum(), "stage-2 loss")))
        if log:
            log(f"stage2 {variant} epoch {epoch} latent {tots[0]:.5f} state {tots[1]:.5f}")
    for p in model.parameters():
        p.requires_grad_(False)
    return Stage2Result(model, curve, windows.stats, variant, config)


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class ClampConfig:
    enabled: bool = True
    max_rot: float = 0.2  # rad
    max_pos: float = 0.2  # m


def _clamp_norm(x: np.ndarray, bound: float) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > bound, x * (bound / np.maximum(n, 1e-300)), x)


class Compensator:
    """A trained AttenNC with its standardization; maps histories to base-state corrections."""

    def __init__(self, model: AttenNC, stats: Standardizer, clamp: ClampConfig = ClampConfig()):
        self.model = model.eval()
        self.stats = stats
        self.clamp = clamp
        self.variant = model.variant
        self.query = query_feature(model.variant)

    def infer(self, inekf_hist: np.ndarray, q_hist: np.ndarray | None, mask: np.ndarray | None = None) -> np.ndarray:
        """Batched ``(B, H, 18)``, ``(B, H, 4)`` raw histories -> ``(B, 9)`` corrections.

        Frames where ``mask`` is false are zero-padded after standardization;
        a window that is not fully valid yields a zero correction.
        """
        inekf_hist = np.asarray(inekf_hist, dtype=float)
        if inekf_hist.ndim != 3 or inekf_hist.shape[1:] != (HISTORY, 18):
            raise ShapeMismatch(f"expected (B, {HISTORY}, 18) filter history, got {inekf_hist.shape}")
        B = inekf_hist.shape[0]
        mask = np.ones((B, HISTORY), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        x = np.where(mask[..., None], self.stats.apply("inekf", inekf_hist), 0.0)
        qt = None
        if self.query is not None:
            q_hist = np.asarray(q_hist, dtype=float)
            if q_hist.shape != (B, HISTORY, 4):
                raise ShapeMismatch(f"expected (B, {HISTORY}, 4) slip history, got {q_hist.shape}")
            qt = _t(np.where(mask[..., None], self.stats.apply(self.query, q_hist), 0.0))
        with torch.no_grad():
            _, e_last, _ = self.model(_t(x), qt)
        e = self.stats.invert("error", e_last.numpy())
        e[~mask.all(axis=1)] = 0.0
        if self.clamp.enabled:
            e[:, 0:3] = _clamp_norm(e[:, 0:3], self.clamp.max_rot)
            e[:, 6:9] = _clamp_norm(e[:, 6:9], self.clamp.max_pos)
        else:
            e[:, 0:3] = _clamp_norm(e[:, 0:3], np.pi)
        return e

    # -- persistence

    def blocks(self) -> dict:
        return {**module_state(self.model, "model."), **self.stats.blocks()}

    def meta(self) -> dict:
        return {"variant": self.variant, "clamp": asdict(self.clamp)}

    @classmethod
    def from_blocks(cls, meta: dict, blocks: dict, clamp: ClampConfig | None = None) -> "Compensator":
        variant = meta["variant"]
        enc_inekf = GRUHead(*_enc_dims("inekf"))
        qf = query_feature(variant)
        enc_q = GRUHead(*_enc_dims(qf)) if variant not in ("SelfAtten", "ExplicitSlip") else None
        model = AttenNC(variant, enc_inekf, enc_q, GRUHead(*_dec_dims("error")))
        load_module_state(model, blocks, "model.")
        return cls(model, Standardizer.from_blocks(blocks), clamp or ClampConfig(**meta.get("clamp", {})))


def infer_compensation(comp: Compensator, inekf_hist, q_hist, mask=None) -> np.ndarray:
    """Single-window convenience wrapper: ``(H, 18)``, ``(H, 4)`` -> 9-vector."""
    q = None if q_hist is None else np.asarray(q_hist)[None]
    m = None if mask is None else np.asarray(mask)[None]
    return comp.infer(np.asarray(inekf_hist)[None], q, m)[0]


def apply_compensation(R: np.ndarray, v: np.ndarray, p: np.ndarray, delta: np.ndarray) -> tuple:
    """Left action on the rotation, additive on velocity and position."""
    delta = np.asarray(delta, dtype=float)
    return exp_so3(delta[0:3]) @ R, v + delta[3:6], p + delta[6:9]


def _window_index(ks: np.ndarray) -> tuple:
    idx = ks[:, None] - (HISTORY - 1) + np.arange(HISTORY)[None, :]
    return np.maximum(idx, 0), idx >= 0


def _compensate_frames(comp, tr: FilterTrace, inekf, qsig, ks, xcomp, R_comp) -> None:
    if comp is None:
        deltas = np.zeros((len(ks), 9))
    else:
        idx, mask = _window_index(ks)
        deltas = comp.infer(inekf[idx], qsig[idx] if comp.query else None, mask)
    for k, d in zip(ks, deltas):
        Rk, vk, pk = apply_compensation(tr.R[k], tr.xbar[k, 3:6], tr.xbar[k, 6:9], d)
        R_comp[k] = Rk
        xcomp[k] = np.concatenate([log_so3(Rk), vk, pk])


def _query_signal(tr: FilterTrace, name: str | None) -> np.ndarray:
    if name == "foot_speed":
        return tr.foot_speed
    if name == "slip":
        return tr.slip
    return np.zeros((len(tr), 4))


def compensate_trace(trace: FilterTrace, comp: Compensator | None, chunk: int = 128) -> FilterTrace:
    """Attach a compensated stream to an existing raw trace.

    Valid because compensation never feeds back into the filter: the result
    matches :func:`run_attennkf` up to the batching of the network calls.
    """
    T = len(trace)
    inekf = np.hstack([trace.xbar, trace.dx])
    qsig = _query_signal(trace, comp.query if comp is not None else None)
    xcomp = np.zeros((T, 9))
    R_comp = np.zeros((T, 3, 3))
    for i in range(0, T, chunk):
        _compensate_frames(comp, trace, inekf, qsig, np.arange(i, min(T, i + chunk)), xcomp, R_comp)
    out = copy.copy(trace)
    out.xcomp = xcomp
    out.R_comp = R_comp
    return out


def run_attennkf(
    episode,
    comp: Compensator | None,
    noise: F.NoiseParams = F.NoiseParams(),
    slip_params: SlipParams = SlipParams(),
    block: int = 32,
    estimator: str = "inekf",
    tick=None,
) -> FilterTrace:
    """Filter the episode and attach compensated states (non-feedback).

    Compensation windows are evaluated in blocks of ``block`` frames as the
    filter produces them; ``block=1`` gives per-frame latency. With
    ``comp=None`` the compensated stream equals the raw stream. ``tick()``,
    when given, is called once per frame after that frame's work is done.
    """
    if block < 1:
        raise ValueError("block must be >= 1")
    T = len(episode)
    inekf = np.zeros((T, 18))
    qsig = np.zeros((T, 4))
    xcomp = np.zeros((T, 9))
    R_comp = np.zeros((T, 3, 3))
    pending = []
    qname = comp.query if comp is not None else None

    def flush(tr):
        if pending:
            _compensate_frames(comp, tr, inekf, qsig, np.array(pending), xcomp, R_comp)
            pending.clear()

    def on_frame(k, tr):
        inekf[k, :9] = tr.xbar[k]
        inekf[k, 9:] = tr.dx[k]
        if qname is not None:
            qsig[k] = _query_signal(tr, qname)[k]
        pending.append(k)
        if len(pending) >= block:
            flush(tr)
        if tick is not None:
            tick()

    tr = run_filter(episode, noise, estimator=estimator, slip_params=slip_params, on_frame=on_frame)
    flush(tr)
    tr.xcomp = xcomp
    tr.R_comp = R_comp
    return tr
