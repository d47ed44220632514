"""Micro diffusion transformer over two token modalities.

The network follows the adaLN-Zero transformer recipe: per-patch modality
embeddings are summed into one token stream (token count stays that of a
single modality), conditioning is the sum of one time embedding per
modality plus a class embedding, and every block is gated by zero-initialized
modulation so training starts from an identity residual stack. Optionally
the last `expert_layers` blocks split into two disjoint half-stacks, one
feeding each modality's output head, at unchanged parameter count and FLOPs.

Parameters live in a flat dict keyed by the checkpoint naming convention
`block<i>.<component>.<tensor>`. Forward/backward are explicit numpy with a
cache, so gradients are exact reverse-mode and can be checked against
finite differences at 64-bit precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDivergedError
from .flow import LossSpec, joint_loss

NULL_CLASS = -1
LN_EPS = 1e-6


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 6
    hidden_dim: int = 64
    heads: int = 4
    patch: int = 4
    bottleneck_dim: int = 32
    expert_layers: int = 2          # 0 disables output experts
    num_classes: int = 8
    class_drop_prob: float = 0.1
    tokens_per_side: int = 4
    modality_dims: dict = field(default_factory=lambda: {"pixel": 48, "latent": 8})
    fourier_freqs: int = 64

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.expert_layers % 2:
            raise ConfigError(f"expert_layers must be even, got {self.expert_layers}")
        if not 0 <= self.expert_layers < self.depth:
            raise ConfigError(
                f"expert_layers must satisfy 0 <= M < depth, got {self.expert_layers}"
            )
        if self.expert_layers and len(self.modality_dims) != 2:
            raise ConfigError("output experts need exactly two modalities")
        if not self.modality_dims:
            raise ConfigError("at least one modality required")

    @property
    def num_tokens(self) -> int:
        return self.tokens_per_side**2

    @property
    def modalities(self) -> list:
        return sorted(self.modality_dims)

    def block_roles(self):
        """(shared block ids, per-modality expert block ids)."""
        shared = list(range(self.depth - self.expert_layers))
        if not self.expert_layers:
            return shared, {m: [] for m in self.modalities}
        half = self.expert_layers // 2
        start = self.depth - self.expert_layers
        experts = {}
        for i, name in enumerate(self.modalities):
            experts[name] = list(range(start + i * half, start + (i + 1) * half))
        return shared, experts


def parameter_shapes(cfg: DenoiserConfig) -> dict:
    """Tensor name -> shape; fully determined by the config."""
    d, b = cfg.hidden_dim, cfg.bottleneck_dim
    feat = 2 * cfg.fourier_freqs
    shapes = {}
    for name in cfg.modalities:
        dm = cfg.modality_dims[name]
        shapes[f"embed.{name}.in.w"] = (dm, b)
        shapes[f"embed.{name}.in.b"] = (b,)
        shapes[f"embed.{name}.proj.w"] = (b, d)
        shapes[f"embed.{name}.proj.b"] = (d,)
        shapes[f"time.{name}.fc1.w"] = (feat, d)
        shapes[f"time.{name}.fc1.b"] = (d,)
        shapes[f"time.{name}.fc2.w"] = (d, d)
        shapes[f"time.{name}.fc2.b"] = (d,)
    shapes["pos"] = (cfg.num_tokens, d)
    shapes["class_embed"] = (cfg.num_classes + 1, d)
    for i in range(cfg.depth):
        shapes[f"block{i}.adaln.w"] = (d, 6 * d)
        shapes[f"block{i}.adaln.b"] = (6 * d,)
        shapes[f"block{i}.attn.qkv.w"] = (d, 3 * d)
        shapes[f"block{i}.attn.qkv.b"] = (3 * d,)
        shapes[f"block{i}.attn.out.w"] = (d, d)
        shapes[f"block{i}.attn.out.b"] = (d,)
        shapes[f"block{i}.mlp.fc1.w"] = (d, 4 * d)
        shapes[f"block{i}.mlp.fc1.b"] = (4 * d,)
        shapes[f"block{i}.mlp.fc2.w"] = (4 * d, d)
        shapes[f"block{i}.mlp.fc2.b"] = (d,)
    for name in cfg.modalities:
        dm = cfg.modality_dims[name]
        shapes[f"head.{name}.adaln.w"] = (d, 2 * d)
        shapes[f"head.{name}.adaln.b"] = (2 * d,)
        shapes[f"head.{name}.out.w"] = (d, dm)
        shapes[f"head.{name}.out.b"] = (dm,)
    return shapes


def param_count(cfg: DenoiserConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())

_ZERO_INIT_SUFFIXES = ("adaln.w", "adaln.b", "out.b")


def init_params(cfg: DenoiserConfig, seed: int = 0, dtype=np.float32) -> dict:
    """adaLN-Zero initialization: modulation layers and output heads start
    at zero so every block begins as an identity residual pass."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        zero = (
            name.endswith(("adaln.w", "adaln.b"))
            or name.startswith("head.") and ".out." in name
            or name.endswith(".b")
        )
        if zero:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = (rng.standard_normal(shape) * 0.02).astype(dtype)
    return params


def ema_update(shadow: dict, params: dict, decay: float) -> dict:
    """shadow <- decay*shadow + (1-decay)*params, per tensor, in place."""
    if not 0.0 <= decay < 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1), got {decay}")
    for name, p in params.items():
        shadow[name] *= decay
        shadow[name] += (1.0 - decay) * p
    return shadow


def fourier_features(t, nfreq: int, dtype=np.float64) -> np.ndarray:
    """Geometric frequency bank on [0, 1] times: [cos(w t), sin(w t)]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), nfreq))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(dtype)


def _silu(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def _silu_bwd(grad, x, sig):
    return grad * sig * (1.0 + x * (1.0 - sig))


# python floats stay weak in numpy promotion; numpy scalars would upcast
# the whole float32 pipeline to float64
_GELU_C = float(np.sqrt(2.0 / np.pi))


def _gelu(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    return 0.5 * x * (1.0 + th), th


def _gelu_bwd(grad, x, th):
    inner_d = _GELU_C * (1.0 + 0.134145 * (x * x))
    return grad * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * inner_d)


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    return xc * inv, inv


def _layernorm_bwd(grad, y, inv):
    gy = (grad * y).mean(axis=-1, keepdims=True)
    gm = grad.mean(axis=-1, keepdims=True)
    return inv * (grad - gm - y * gy)


def _linear(x, w, b):
    return x @ w + b


def _linear_bwd(grad, x, w, grads, wname, bname):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad.reshape(-1, grad.shape[-1])
    grads[wname] += x2.T @ g2
    grads[bname] += g2.sum(axis=0)
    return grad @ w.T


def _block_forward(params, i, x, cond_act, cfg):
    """One adaLN-gated transformer block; returns (out, cache)."""
    B, T, d = x.shape
    h = cfg.heads
    hd = d // h
    mod = _linear(cond_act, params[f"block{i}.adaln.w"], params[f"block{i}.adaln.b"])
    sh1, sc1, g1, sh2, sc2, g2 = np.split(mod, 6, axis=-1)

    y1, inv1 = _layernorm(x)
    m1 = y1 * (1.0 + sc1[:, None, :]) + sh1[:, None, :]
    qkv = _linear(m1, params[f"block{i}.attn.qkv.w"], params[f"block{i}.attn.qkv.b"])
    q, k, v = (a.reshape(B, T, h, hd).transpose(0, 2, 1, 3) for a in np.split(qkv, 3, axis=-1))
    scores = q @ k.transpose(0, 1, 3, 2) * (1.0 / float(np.sqrt(hd)))
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    att = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    proj = _linear(att, params[f"block{i}.attn.out.w"], params[f"block{i}.attn.out.b"])
    x1 = x + g1[:, None, :] * proj

    y2, inv2 = _layernorm(x1)
    m2 = y2 * (1.0 + sc2[:, None, :]) + sh2[:, None, :]
    pre = _linear(m2, params[f"block{i}.mlp.fc1.w"], params[f"block{i}.mlp.fc1.b"])
    act, th = _gelu(pre)
    mlp = _linear(act, params[f"block{i}.mlp.fc2.w"], params[f"block{i}.mlp.fc2.b"])
    out = x1 + g2[:, None, :] * mlp

    cache = dict(x=x, y1=y1, inv1=inv1, m1=m1, q=q, k=k, v=v, probs=probs, att=att,
                 proj=proj, x1=x1, y2=y2, inv2=inv2, m2=m2, pre=pre, act=act, th=th,
                 mlp=mlp, sc1=sc1, g1=g1, sc2=sc2, g2=g2)
    return out, cache


def _block_backward(params, i, grad_out, cache, cfg, grads):
    """Mirror of _block_forward; returns (grad_x, grad_cond_act)."""
    B, T, d = grad_out.shape
    h = cfg.heads
    hd = d // h
    c = cache

    # mlp residual: out = x1 + g2*mlp
    g_mlp = grad_out * c["g2"][:, None, :]
    g_g2 = (grad_out * c["mlp"]).sum(axis=1)
    g_act = _linear_bwd(g_mlp, c["act"], params[f"block{i}.mlp.fc2.w"], grads,
                        f"block{i}.mlp.fc2.w", f"block{i}.mlp.fc2.b")
    g_pre = _gelu_bwd(g_act, c["pre"], c["th"])
    g_m2 = _linear_bwd(g_pre, c["m2"], params[f"block{i}.mlp.fc1.w"], grads,
                       f"block{i}.mlp.fc1.w", f"block{i}.mlp.fc1.b")
    g_sc2 = (g_m2 * c["y2"]).sum(axis=1)
    g_sh2 = g_m2.sum(axis=1)
    g_y2 = g_m2 * (1.0 + c["sc2"][:, None, :])
    g_x1 = grad_out + _layernorm_bwd(g_y2, c["y2"], c["inv2"])

    # attention residual: x1 = x + g1*proj
    g_proj = g_x1 * c["g1"][:, None, :]
    g_g1 = (g_x1 * c["proj"]).sum(axis=1)
    g_att = _linear_bwd(g_proj, c["att"], params[f"block{i}.attn.out.w"], grads,
                        f"block{i}.attn.out.w", f"block{i}.attn.out.b")
    g_att = g_att.reshape(B, T, h, hd).transpose(0, 2, 1, 3)
    g_probs = g_att @ c["v"].transpose(0, 1, 3, 2)
    g_v = c["probs"].transpose(0, 1, 3, 2) @ g_att
    g_scores = c["probs"] * (g_probs - (g_probs * c["probs"]).sum(axis=-1, keepdims=True))
    g_scores *= 1.0 / float(np.sqrt(hd))
    g_q = g_scores @ c["k"]
    g_k = g_scores.transpose(0, 1, 3, 2) @ c["q"]
    g_qkv = np.concatenate(
        [a.transpose(0, 2, 1, 3).reshape(B, T, d) for a in (g_q, g_k, g_v)], axis=-1
    )
    g_m1 = _linear_bwd(g_qkv, c["m1"], params[f"block{i}.attn.qkv.w"], grads,
                       f"block{i}.attn.qkv.w", f"block{i}.attn.qkv.b")
    g_sc1 = (g_m1 * c["y1"]).sum(axis=1)
    g_sh1 = g_m1.sum(axis=1)
    g_y1 = g_m1 * (1.0 + c["sc1"][:, None, :])
    g_x = g_x1 + _layernorm_bwd(g_y1, c["y1"], c["inv1"])

    g_mod = np.concatenate([g_sh1, g_sc1, g_g1, g_sh2, g_sc2, g_g2], axis=-1)
    g_cond_act = _linear_bwd(g_mod, cache["cond_act"], params[f"block{i}.adaln.w"],
                             grads, f"block{i}.adaln.w", f"block{i}.adaln.b")
    return g_x, g_cond_act


def forward(params: dict, cfg: DenoiserConfig, tokens: dict, times: dict,
            labels=None, want_cache: bool = False):
    """x-prediction per modality from noised token grids.

    tokens: modality -> (B, P, P, D); times: modality -> scalar or (B,);
    labels: (B,) ints in [0, K) or NULL_CLASS. Deterministic; class drop is
    the trainer's job. Returns preds (same keyed shapes), plus the cache
    when requested.
    """
    names = cfg.modalities
    for name in names:
        if name not in tokens:
            raise ConfigError(f"missing modality {name!r} in tokens")
    dtype = params["pos"].dtype
    first = tokens[names[0]]
    B = first.shape[0]
    T = cfg.num_tokens
    for name in names:
        grid = tokens[name]
        if grid.shape[:3] != (B, cfg.tokens_per_side, cfg.tokens_per_side):
            raise ValueError(
                f"modality {name!r} grid {grid.shape} misaligned with "
                f"{(B, cfg.tokens_per_side, cfg.tokens_per_side)}"
            )
        if grid.shape[3] != cfg.modality_dims[name]:
            raise ValueError(
                f"modality {name!r} token dim {grid.shape[3]} != {cfg.modality_dims[name]}"
            )

    cache = {"tok": {}, "bott": {}, "ff": {}, "t1": {}, "t1sig": {}, "blocks": {}}

    # summed per-patch embeddings keep a single stream of T tokens
    x = np.broadcast_to(params["pos"], (B, T, cfg.hidden_dim)).astype(dtype).copy()
    for name in names:
        tok = tokens[name].reshape(B, T, cfg.modality_dims[name]).astype(dtype)
        bott = _linear(tok, params[f"embed.{name}.in.w"], params[f"embed.{name}.in.b"])
        x += _linear(bott, params[f"embed.{name}.proj.w"], params[f"embed.{name}.proj.b"])
        cache["tok"][name] = tok
        cache["bott"][name] = bott

    # conditioning: one time embedding per modality plus the class row
    cond = np.zeros((B, cfg.hidden_dim), dtype=dtype)
    for name in names:
        t = np.asarray(times[name], dtype=np.float64)
        t = np.broadcast_to(t, (B,))
        ff = fourier_features(t, cfg.fourier_freqs, dtype)
        h1 = _linear(ff, params[f"time.{name}.fc1.w"], params[f"time.{name}.fc1.b"])
        a1, sig1 = _silu(h1)
        cond += _linear(a1, params[f"time.{name}.fc2.w"], params[f"time.{name}.fc2.b"])
        cache["ff"][name] = ff
        cache["t1"][name] = h1
        cache["t1sig"][name] = sig1
        cache["t1act_" + name] = a1
    if labels is None:
        labels = np.full(B, NULL_CLASS, dtype=np.int64)
    labels = np.asarray(labels)
    if np.any(labels >= cfg.num_classes):
        raise ValueError(f"class label out of range [0, {cfg.num_classes})")
    idx = np.where(labels < 0, cfg.num_classes, labels)
    cond += params["class_embed"][idx]
    cond_act, cond_sig = _silu(cond)

    shared, experts = cfg.block_roles()
    for i in shared:
        x, bc = _block_forward(params, i, x, cond_act, cfg)
        bc["cond_act"] = cond_act
        cache["blocks"][i] = bc

    stack_out = {}
    for name in names:
        xs = x
        for i in experts[name]:
            xs, bc = _block_forward(params, i, xs, cond_act, cfg)
            bc["cond_act"] = cond_act
            cache["blocks"][i] = bc
        stack_out[name] = xs

    preds = {}
    for name in names:
        mod = _linear(cond_act, params[f"head.{name}.adaln.w"], params[f"head.{name}.adaln.b"])
        sh, sc = np.split(mod, 2, axis=-1)
        yh, invh = _layernorm(stack_out[name])
        mh = yh * (1.0 + sc[:, None, :]) + sh[:, None, :]
        out = _linear(mh, params[f"head.{name}.out.w"], params[f"head.{name}.out.b"])
        preds[name] = out.reshape(B, cfg.tokens_per_side, cfg.tokens_per_side,
                                  cfg.modality_dims[name])
        cache[f"head_{name}"] = dict(yh=yh, invh=invh, mh=mh, sc=sc, stack_in=stack_out[name])

    cache.update(cond=cond, cond_sig=cond_sig, cond_act=cond_act, idx=idx, B=B,
                 shared=shared, experts=experts)
    return (preds, cache) if want_cache else preds


def backward(params: dict, cfg: DenoiserConfig, cache: dict, grad_preds: dict) -> dict:
    """Exact reverse-mode gradients for every parameter tensor."""
    names = cfg.modalities
    dtype = params["pos"].dtype
    B, T, d = cache["B"], cfg.num_tokens, cfg.hidden_dim
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    g_cond_act = np.zeros((B, d), dtype=dtype)

    g_stack = {}
    for name in names:
        hc = cache[f"head_{name}"]
        g_out = grad_preds[name].reshape(B, T, cfg.modality_dims[name]).astype(dtype)
        g_mh = _linear_bwd(g_out, hc["mh"], params[f"head.{name}.out.w"], grads,
                           f"head.{name}.out.w", f"head.{name}.out.b")
        g_sc = (g_mh * hc["yh"]).sum(axis=1)
        g_sh = g_mh.sum(axis=1)
        g_yh = g_mh * (1.0 + hc["sc"][:, None, :])
        g_stack[name] = _layernorm_bwd(g_yh, hc["yh"], hc["invh"])
        g_mod = np.concatenate([g_sh, g_sc], axis=-1)
        g_cond_act += _linear_bwd(g_mod, cache["cond_act"], params[f"head.{name}.adaln.w"],
                                  grads, f"head.{name}.adaln.w", f"head.{name}.adaln.b")

    g_x = np.zeros((B, T, d), dtype=dtype)
    for name in names:
        gs = g_stack[name]
        for i in reversed(cache["experts"][name]):
            gs, gca = _block_backward(params, i, gs, cache["blocks"][i], cfg, grads)
            g_cond_act += gca
        g_x += gs

    for i in reversed(cache["shared"]):
        g_x, gca = _block_backward(params, i, g_x, cache["blocks"][i], cfg, grads)
        g_cond_act += gca

    # conditioning vector feeds every block through one shared silu
    g_cond = _silu_bwd(g_cond_act, cache["cond"], cache["cond_sig"])
    np.add.at(grads["class_embed"], cache["idx"], g_cond)
    for name in names:
        g_a1 = _linear_bwd(g_cond, cache["t1act_" + name], params[f"time.{name}.fc2.w"],
                           grads, f"time.{name}.fc2.w", f"time.{name}.fc2.b")
        g_h1 = _silu_bwd(g_a1, cache["t1"][name], cache["t1sig"][name])
        _linear_bwd(g_h1, cache["ff"][name], params[f"time.{name}.fc1.w"], grads,
                    f"time.{name}.fc1.w", f"time.{name}.fc1.b")

    grads["pos"] += g_x.sum(axis=0)
    for name in names:
        g_bott = _linear_bwd(g_x, cache["bott"][name], params[f"embed.{name}.proj.w"],
                             grads, f"embed.{name}.proj.w", f"embed.{name}.proj.b")
        _linear_bwd(g_bott, cache["tok"][name], params[f"embed.{name}.in.w"], grads,
                    f"embed.{name}.in.w", f"embed.{name}.in.b")
    return grads


class ModelDenoiser:
    """Adapts (params, config) to the sampler's predict protocol."""

    def __init__(self, params: dict, cfg: DenoiserConfig):
        self.params = params
        self.cfg = cfg
        side = cfg.tokens_per_side
        self.modality_shapes = {
            m: (side, side, d) for m, d in cfg.modality_dims.items()
        }

    def predict(self, states: dict, times: dict, labels=None) -> dict:
        return forward(self.params, self.cfg, states, times, labels)


def loss_and_grad(params: dict, cfg: DenoiserConfig, batch: dict,
                  loss_spec: LossSpec):
    """Joint loss plus gradients for one batch.

    batch keys: z (noised grids), x (clean grids), times, labels, and an
    optional per-modality `active` sample mask. Returns
    (total, components, grads).
    """
    preds, cache = forward(params, cfg, batch["z"], batch["times"],
                           batch.get("labels"), want_cache=True)
    targets = {m: (batch["x"][m], batch["times"][m]) for m in preds}
    active = batch.get("active")
    total, components = joint_loss(preds, targets, loss_spec, active)
    if not np.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss {total}")

    grad_preds = {}
    for name, pred in preds.items():
        x, t = targets[name]
        mask = None if active is None else active.get(name)
        g = np.zeros_like(pred)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            n_active = int(mask.sum())
            if n_active == 0:
                grad_preds[name] = g
                continue
        else:
            mask = np.ones(pred.shape[0], dtype=bool)
            n_active = pred.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (pred.shape[0],))
        div = np.maximum(1.0 - t_arr, loss_spec.t_clip).reshape(-1, 1, 1, 1)
        div = (div * div).astype(pred.dtype, copy=False)
        numel = n_active * int(np.prod(pred.shape[1:]))
        scale = 2.0 * loss_spec.weights[name] / numel
        g[mask] = (scale * (pred - x) / div)[mask]
        grad_preds[name] = g

    grads = backward(params, cfg, cache, grad_preds)
    return total, components, grads
