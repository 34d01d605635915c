"""Mask-guided latent video diffusion.

The latent space is an exact space-to-depth patchify of frames shifted to
[-1, 1].  A small UNet predicts the injected noise from the noisy latents,
the clean first-frame latent and a first-frame visibility channel, with text
cross-attention, temporal attention, and optional additive mask features
on the decoder side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import ParamStore
from .segnet import one_hot
from .tensor import Tensor


@dataclass
class DiffConfig:
    T: int = 100
    # the classic 1e-4..0.02 linear schedule is tuned for 1000 steps and leaves
    # alpha_bar_T = 0.37 at T = 100; this one ends near 5e-3
    beta_start: float = 1e-3
    beta_end: float = 0.1
    patch: int = 4
    widths: tuple = (64, 128, 256)
    d_txt: int = 64
    vocab: int = 32
    max_frames: int = 16
    mask_widths: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        # keep the float32 round trip through checkpoint metadata exact
        self.beta_start = float(np.float32(self.beta_start))
        self.beta_end = float(np.float32(self.beta_end))
        self.widths = tuple(int(w) for w in self.widths)
        self.mask_widths = tuple(int(w) for w in self.mask_widths)

    @property
    def cz(self):
        return 3 * self.patch**2

    def to_meta(self):
        return np.array([self.T, self.beta_start, self.beta_end, self.patch, *self.widths, self.d_txt,
                         self.vocab, self.max_frames, *self.mask_widths], dtype=np.float32)

    @classmethod
    def from_meta(cls, meta):
        m = [float(v) for v in meta]
        return cls(int(m[0]), m[1], m[2], int(m[3]), tuple(int(v) for v in m[4:7]), int(m[7]), int(m[8]),
                   int(m[9]), tuple(int(v) for v in m[10:14]))


# ---------------------------------------------------------------------------
# schedule and latent space
# ---------------------------------------------------------------------------

@dataclass
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        """Cumulative product at 1-based step ``t``; ``t = 0`` gives 1."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bars[np.maximum(t, 1) - 1], 1.0)


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(T, betas, alphas, np.cumprod(alphas))


def latent_encode(clip, patch: int = 4) -> np.ndarray:
    """``[...,3,H,W]`` in [0,1] -> ``[...,3p^2,H/p,W/p]`` in [-1,1] (space-to-depth).

    The shift runs in float64, so float32 frames survive the round trip
    bit-exactly (2x - 1 needs at most 53 mantissa bits for x >= 2^-29).
    """
    x = np.asarray(clip, dtype=np.float64)
    *lead, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"frame size {h}x{w} not divisible by patch {patch}")
    x = 2.0 * x - 1.0
    x = x.reshape(*lead, c, h // patch, patch, w // patch, patch)
    nd = len(lead)
    perm = tuple(range(nd)) + tuple(nd + i for i in (0, 2, 4, 1, 3))
    return np.ascontiguousarray(x.transpose(perm)).reshape(*lead, c * patch * patch, h // patch, w // patch)


def latent_decode(z, patch: int = 4) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    *lead, cz, hz, wz = z.shape
    c = cz // (patch * patch)
    x = z.reshape(*lead, c, patch, patch, hz, wz)
    nd = len(lead)
    perm = tuple(range(nd)) + tuple(nd + i for i in (0, 3, 1, 4, 2))
    x = np.ascontiguousarray(x.transpose(perm)).reshape(*lead, c, hz * patch, wz * patch)
    return (x + 1.0) / 2.0


def build_condition(z_t, z0) -> Tensor:
    """Concatenate noisy latents, first-frame-only clean latents and a visibility channel.

    Inputs are ``[B,N,Cz,h,w]`` (or ``[N,Cz,h,w]``); output has ``2*Cz+1`` channels.
    """
    zt = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0)
    if zt.shape != z0.shape:
        raise ValueError(f"noisy {zt.shape} and clean {z0.shape} latents differ in shape")
    first = np.zeros_like(z0, dtype=zt.dtype)
    first[..., 0, :, :, :] = z0[..., 0, :, :, :]
    vis = np.zeros(z0.shape[:-3] + (1,) + z0.shape[-2:], dtype=zt.dtype)
    vis[..., 0, :, :, :] = 1.0
    return T.concat([zt, Tensor(first, dtype=zt.dtype), Tensor(vis, dtype=zt.dtype)], axis=-3)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _temb_dim(cfg):
    return 4 * cfg.widths[0]


def _add_resblock(ps, name, cin, cout, emb_dim=None):
    nn.add_norm(ps, f"{name}.n1", cin)
    nn.add_conv(ps, f"{name}.c1", cin, cout)
    if emb_dim:
        nn.add_linear(ps, f"{name}.emb", emb_dim, cout)
    nn.add_norm(ps, f"{name}.n2", cout)
    # residual branches start at zero so each block is the identity (or its
    # skip projection) at initialisation
    nn.add_conv(ps, f"{name}.c2", cout, cout, zero=True)
    if cin != cout:
        nn.add_conv(ps, f"{name}.skip", cin, cout, k=1)


def _add_attn(ps, name, c, ctx_dim=None):
    nn.add_norm(ps, f"{name}.n", c)
    nn.add_linear(ps, f"{name}.q", c, c, bias=False)
    nn.add_linear(ps, f"{name}.k", ctx_dim or c, c, bias=False)
    nn.add_linear(ps, f"{name}.v", ctx_dim or c, c, bias=False)
    nn.add_linear(ps, f"{name}.o", c, c, zero=True)


def _add_level(ps, name, cin, cout, cfg):
    _add_resblock(ps, f"{name}.res", cin, cout, _temb_dim(cfg))
    _add_attn(ps, f"{name}.sa", cout)
    _add_attn(ps, f"{name}.ca", cout, cfg.d_txt)
    _add_attn(ps, f"{name}.ta", cout)


def init_unet(cfg: DiffConfig, seed: int = 0) -> ParamStore:
    ps = ParamStore(seed)
    c1, c2, c3 = cfg.widths
    td = _temb_dim(cfg)
    nn.add_linear(ps, "temb.l1", c1, td)
    nn.add_linear(ps, "temb.l2", td, td)
    ps.add("temb.frame", (cfg.max_frames, td), "normal")
    nn.add_conv(ps, "in", 2 * cfg.cz + 1, c1)
    _add_level(ps, "down1", c1, c1, cfg)
    nn.add_conv(ps, "down1.ds", c1, c1)
    _add_level(ps, "down2", c1, c2, cfg)
    nn.add_conv(ps, "down2.ds", c2, c2)
    _add_level(ps, "mid", c2, c3, cfg)
    _add_level(ps, "up2", c3 + c2, c2, cfg)
    _add_level(ps, "up1", c2 + c1, c1, cfg)
    nn.add_norm(ps, "out.n", c1)
    nn.add_conv(ps, "out", c1, cfg.cz, zero=True)
    return ps


def init_text(cfg: DiffConfig, seed: int = 0) -> ParamStore:
    ps = ParamStore(seed + 1)
    ps.add("embed", (cfg.vocab, cfg.d_txt), "randn")
    return ps


# decoder-side fusion sites: (unet level, spatial downscale vs latent, channels)
def fusion_sites(cfg: DiffConfig):
    c1, c2, c3 = cfg.widths
    return [("mid", 4, c3), ("up2", 2, c2), ("up1", 1, c1)]


def init_mask_guide(cfg: DiffConfig, seed: int = 0) -> ParamStore:
    ps = ParamStore(seed + 2)
    widths = (3,) + tuple(cfg.mask_widths)
    for i in range(len(cfg.mask_widths)):
        nn.add_conv(ps, f"b{i}.down", widths[i], widths[i + 1])
        _add_resblock(ps, f"b{i}.res", widths[i + 1], widths[i + 1])
        _add_attn(ps, f"b{i}.ta", widths[i + 1])
    for level, _, c in fusion_sites(cfg):
        src = _site_source(cfg, level)
        nn.add_conv(ps, f"proj.{level}", cfg.mask_widths[src], c, k=1, zero=True)
    return ps


def _site_source(cfg, level):
    # mask-encoder block whose output resolution matches the site
    scale = dict((lvl, s) for lvl, s, _ in fusion_sites(cfg))[level]
    # block i halves the frame size i+1 times; latent is frame / patch
    target = cfg.patch * scale
    return int(round(math.log2(target))) - 1


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def sinusoidal(t, dim):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _resblock(ps, name, x, emb=None):
    h = nn.conv(ps, f"{name}.c1", T.silu(nn.norm(ps, f"{name}.n1", x)))
    if emb is not None:
        e = nn.linear(ps, f"{name}.emb", T.silu(emb))
        h = T.add(h, T.reshape(e, e.shape + (1, 1)))
    h = nn.conv(ps, f"{name}.c2", T.silu(nn.norm(ps, f"{name}.n2", h)))
    skip = nn.conv(ps, f"{name}.skip", x) if f"{name}.skip.w" in ps else x
    return T.add(skip, h)


def _attend(q, k, v, bias=None, return_weights=False):
    # q [..., Lq, C], k/v [..., Lk, C]
    c = q.shape[-1]
    logits = T.scale(T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                     1.0 / math.sqrt(c))
    if bias is not None:
        logits = T.add(logits, bias)
    a = T.softmax(logits, axis=-1)
    out = T.matmul(a, v)
    return (out, a) if return_weights else out


def spatial_attention(ps, name, x, return_weights=False):
    """Self-attention over the h*w positions of each frame; residual."""
    bn, c, h, w = x.shape
    tok = T.transpose(T.reshape(nn.norm(ps, f"{name}.n", x), (bn, c, h * w)), (0, 2, 1))
    q, k, v = (nn.linear(ps, f"{name}.{p}", tok) for p in "qkv")
    out, a = _attend(q, k, v, return_weights=True)
    out = nn.linear(ps, f"{name}.o", out)
    y = T.add(x, T.reshape(T.transpose(out, (0, 2, 1)), (bn, c, h, w)))
    return (y, a) if return_weights else y


def cross_attention(ps, name, x, ctx, n_frames, ctx_bias=None, return_weights=False):
    """Spatial tokens attend to text context ``[B,L,d]``; identity when L == 0."""
    if ctx is None or ctx.shape[1] == 0:
        return (x, None) if return_weights else x
    bn, c, h, w = x.shape
    b = bn // n_frames
    tok = T.transpose(T.reshape(nn.norm(ps, f"{name}.n", x), (b, n_frames, c, h * w)), (0, 1, 3, 2))
    q = T.reshape(nn.linear(ps, f"{name}.q", tok), (b, n_frames * h * w, c))
    k = nn.linear(ps, f"{name}.k", ctx)
    v = nn.linear(ps, f"{name}.v", ctx)
    out, a = _attend(q, k, v, bias=ctx_bias, return_weights=True)
    out = nn.linear(ps, f"{name}.o", out)  # [B, N*hw, C]
    out = T.transpose(T.reshape(out, (b, n_frames, h * w, c)), (0, 1, 3, 2))
    y = T.add(x, T.reshape(out, (bn, c, h, w)))
    return (y, a) if return_weights else y


def temporal_attention(ps, name, x, n_frames, return_weights=False):
    """Attention across frames at each spatial position; residual."""
    bn, c, h, w = x.shape
    b = bn // n_frames
    xn = T.reshape(nn.norm(ps, f"{name}.n", x), (b, n_frames, c, h * w))
    tok = T.transpose(xn, (0, 3, 1, 2))  # [B, hw, N, C]
    q, k, v = (nn.linear(ps, f"{name}.{p}", tok) for p in "qkv")
    out, a = _attend(q, k, v, return_weights=True)
    out = nn.linear(ps, f"{name}.o", out)
    out = T.reshape(T.transpose(out, (0, 2, 3, 1)), (bn, c, h, w))
    y = T.add(x, out)
    return (y, a) if return_weights else y


def embed_text(tokens, ps: ParamStore) -> Tensor:
    """Token ids ``[L]`` or ``[B,L]`` -> embedding rows ``[...,L,d]``."""
    ids = np.asarray(tokens, dtype=np.int64)
    table = ps["embed"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("token id outside vocabulary")
    flat = T.take_rows(table, ids.reshape(-1))
    return T.reshape(flat, ids.shape + (table.shape[1],))


def text_context(token_lists, ps: ParamStore):
    """Pad a batch of token sequences; returns (ctx ``[B,L,d]``, additive key bias or None)."""
    lens = [len(t) for t in token_lists]
    L = max(lens) if lens else 0
    ids = np.zeros((len(token_lists), L), dtype=np.int64)
    for i, t in enumerate(token_lists):
        ids[i, : len(t)] = t
    ctx = embed_text(ids, ps)
    if all(n == L for n in lens):
        return ctx, None
    bias = np.zeros((len(token_lists), 1, L), dtype=ctx.dtype)
    for i, n in enumerate(lens):
        bias[i, :, n:] = -1e9
    return ctx, Tensor(bias, dtype=ctx.dtype)


def _mask_block(ps, i, x, n_frames):
    x = nn.conv(ps, f"b{i}.down", x, stride=2)
    x = _resblock(ps, f"b{i}.res", x)
    return temporal_attention(ps, f"b{i}.ta", x, n_frames)


def mask_guidance(mask_onehot, ps: ParamStore, cfg: DiffConfig):
    """Multi-scale features from one-hot masks ``[B,N,3,H,W]`` (or ``[N,3,H,W]``).

    Returns a dict level -> projected feature ``[B*N,C,h,w]`` for every fusion site.
    """
    m = np.asarray(mask_onehot.data if isinstance(mask_onehot, Tensor) else mask_onehot)
    if m.ndim == 4:
        m = m[None]
    if m.shape[2] != 3:
        raise ValueError(f"expected one-hot masks with 3 channels, got {m.shape}")
    b, n = m.shape[:2]
    x = Tensor(m.reshape((b * n,) + m.shape[2:]))
    raw = []
    for i in range(len(cfg.mask_widths)):
        x = _mask_block(ps, i, x, n)
        raw.append(x)
    out = {}
    for level, _, _ in fusion_sites(cfg):
        out[level] = nn.conv(ps, f"proj.{level}", raw[_site_source(cfg, level)])
    return out


def mask_features_raw(mask_onehot, ps: ParamStore, cfg: DiffConfig):
    """Unprojected per-block features (for shape and sensitivity checks)."""
    m = np.asarray(mask_onehot)
    if m.ndim == 4:
        m = m[None]
    b, n = m.shape[:2]
    x = Tensor(m.reshape((b * n,) + m.shape[2:]))
    raw = []
    for i in range(len(cfg.mask_widths)):
        x = _mask_block(ps, i, x, n)
        raw.append(x)
    return raw


def _level(ps, name, x, emb, ctx, ctx_bias, n_frames, h=None):
    x = _resblock(ps, f"{name}.res", x, emb)
    x = spatial_attention(ps, f"{name}.sa", x)
    x = cross_attention(ps, f"{name}.ca", x, ctx, n_frames, ctx_bias)
    if h is not None:
        x = T.add(x, h)
    return temporal_attention(ps, f"{name}.ta", x, n_frames)


def unet_eps(zbar, t, text_ctx, h_feats, ps: ParamStore, cfg: DiffConfig, ctx_bias=None) -> Tensor:
    """Predict noise ``[B,N,Cz,h,w]`` from the condition tensor ``[B,N,2Cz+1,h,w]``.

    ``t`` is an int or one int per clip in ``[1, T]``.  ``h_feats`` is the
    output of :func:`mask_guidance` or None (no mask fusion).
    """
    zbar = zbar if isinstance(zbar, Tensor) else Tensor(zbar)
    if zbar.ndim == 4:
        zbar = T.reshape(zbar, (1,) + zbar.shape)
        if text_ctx is not None and text_ctx.ndim == 2:
            text_ctx = T.reshape(text_ctx, (1,) + text_ctx.shape)
        out = unet_eps(zbar, t, text_ctx, h_feats, ps, cfg, ctx_bias)
        return T.reshape(out, out.shape[1:])
    b, n, cin, hz, wz = zbar.shape
    if cin != 2 * cfg.cz + 1:
        raise ValueError(f"condition has {cin} channels, expected {2 * cfg.cz + 1}")
    if n > cfg.max_frames:
        raise ValueError(f"{n} frames exceeds max_frames={cfg.max_frames}")
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    if ts.min() < 1 or ts.max() > cfg.T:
        raise ValueError(f"timestep outside [1, {cfg.T}]")
    dt = zbar.dtype
    # per-frame embedding: timestep MLP + learned frame-index row
    temb = Tensor(sinusoidal(ts, cfg.widths[0]), dtype=dt)
    temb = nn.linear(ps, "temb.l2", T.silu(nn.linear(ps, "temb.l1", temb)))  # [B,td]
    frame = T.getitem(ps["temb.frame"], slice(0, n))  # [N,td]
    emb = T.reshape(T.add(T.reshape(temb, (b, 1, -1)), frame), (b * n, -1))

    x = T.reshape(zbar, (b * n, cin, hz, wz))
    x = nn.conv(ps, "in", x)
    s1 = _level(ps, "down1", x, emb, text_ctx, ctx_bias, n)
    x = nn.conv(ps, "down1.ds", s1, stride=2)
    s2 = _level(ps, "down2", x, emb, text_ctx, ctx_bias, n)
    x = nn.conv(ps, "down2.ds", s2, stride=2)
    hf = h_feats or {}
    x = _level(ps, "mid", x, emb, text_ctx, ctx_bias, n, hf.get("mid"))
    x = T.concat([T.upsample_bilinear(x, 2), s2], axis=1)
    x = _level(ps, "up2", x, emb, text_ctx, ctx_bias, n, hf.get("up2"))
    x = T.concat([T.upsample_bilinear(x, 2), s1], axis=1)
    x = _level(ps, "up1", x, emb, text_ctx, ctx_bias, n, hf.get("up1"))
    x = nn.conv(ps, "out", T.silu(nn.norm(ps, "out.n", x)))
    return T.reshape(x, (b, n, cfg.cz, hz, wz))


# ---------------------------------------------------------------------------
# training objective and sampler
# ---------------------------------------------------------------------------

def noise_latents(z0, t, eps, schedule: DiffusionSchedule):
    ab = schedule.alpha_bar(np.asarray(t)).reshape((-1,) + (1,) * (z0.ndim - 1)).astype(z0.dtype)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def _batch(samples):
    if not isinstance(samples, (list, tuple)):
        samples = [samples]
    return samples


def train_loss(samples, unet: ParamStore, mask_ps, text_ps: ParamStore, schedule: DiffusionSchedule,
               rng, cfg: DiffConfig, t=None, eps=None, masks=None, return_pred=False):
    """Noise-prediction MSE for one clip or a list of clips.

    ``t``/``eps`` may be fixed for reproducible checks; otherwise they are
    drawn from ``rng``.  ``masks`` overrides the ego masks fed to the mask
    encoder (defaults to the samples' ground-truth ego masks).
    """
    samples = _batch(samples)
    dt = T.default_dtype()
    z0 = latent_encode(np.stack([s.ego_clip for s in samples]), cfg.patch).astype(dt)
    b = z0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=b)
    if eps is None:
        eps = rng.standard_normal(z0.shape).astype(dt)
    eps = np.asarray(eps, dtype=dt)
    zt = noise_latents(z0, t, eps, schedule).astype(dt)
    zbar = build_condition(zt, z0)
    ctx, bias = text_context([s.tokens for s in samples], text_ps)
    h = None
    if mask_ps is not None:
        mk = np.stack([s.ego_masks for s in samples]) if masks is None else np.asarray(masks)
        h = mask_guidance(one_hot(mk), mask_ps, cfg)
    pred = unet_eps(zbar, t, ctx, h, unet, cfg, bias)
    diff = T.sub(pred, eps)
    loss = T.mean(T.mul(diff, diff))
    return (loss, pred, eps) if return_pred else loss


def ddim_timesteps(T_total: int, steps: int) -> np.ndarray:
    """Descending, evenly spaced 1-based timesteps; ``steps == T`` gives every step."""
    if not 1 <= steps <= T_total:
        raise ValueError(f"steps must be in [1, {T_total}]")
    if steps == 1:
        return np.array([T_total])
    ts = np.round(np.linspace(1, T_total, steps)).astype(np.int64)
    return ts[::-1].copy()


def ddim_sample(g1, tokens, masks, unet: ParamStore, mask_ps, text_ps: ParamStore,
                schedule: DiffusionSchedule, cfg: DiffConfig, steps: int = 100, seed: int = 0,
                n_frames: int | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling of an ego clip ``[N,3,H,W]``.

    ``masks`` are class maps ``[N,H,W]`` or None (no mask conditioning, the
    phase-1 model).  Frame 1 of the result is ``g1`` exactly.
    """
    ts = ddim_timesteps(schedule.T, steps)
    g1 = np.asarray(g1, dtype=np.float32)
    if masks is not None:
        n_frames = np.asarray(masks).shape[0]
    if n_frames is None:
        raise ValueError("n_frames required when masks is None")
    dt = T.default_dtype()
    h_res, w_res = g1.shape[-2:]
    z_first = latent_encode(g1, cfg.patch).astype(dt)
    z0_cond = np.zeros((1, n_frames) + z_first.shape, dtype=dt)
    z0_cond[0, 0] = z_first
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(z0_cond.shape).astype(dt)
    with T.no_grad():
        ctx, bias = text_context([np.asarray(tokens)], text_ps)
        h = None
        if masks is not None and mask_ps is not None:
            h = mask_guidance(one_hot(np.asarray(masks)[None]), mask_ps, cfg)
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            ab = float(schedule.alpha_bar(t))
            ab_prev = float(schedule.alpha_bar(t_prev))
            eps = unet_eps(build_condition(z, z0_cond), int(t), ctx, h, unet, cfg, bias).data
            x0 = np.clip((z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
            z = (math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps).astype(dt)
    clip = np.clip(latent_decode(z[0], cfg.patch), 0.0, 1.0).astype(np.float32)
    clip[0] = g1
    assert clip.shape[-2:] == (h_res, w_res)
    return clip


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_entries(cfg: DiffConfig, unet: ParamStore, text_ps: ParamStore, mask_ps=None) -> dict:
    entries = {f"diff/unet/{k}": v for k, v in unet.state().items()}
    entries.update({f"diff/text/{k}": v for k, v in text_ps.state().items()})
    if mask_ps is not None:
        entries.update({f"diff/mask/{k}": v for k, v in mask_ps.state().items()})
    entries["diff/meta"] = cfg.to_meta()
    return entries


def from_checkpoint(entries: dict):
    """Returns (cfg, unet, text, mask-or-None)."""
    if "diff/meta" not in entries:
        raise ValueError("checkpoint has no diff/meta entry")
    cfg = DiffConfig.from_meta(entries["diff/meta"])
    unet = init_unet(cfg)
    unet.load_state(entries, "diff/unet/")
    text = init_text(cfg)
    text.load_state(entries, "diff/text/")
    mask = None
    if any(k.startswith("diff/mask/") for k in entries):
        mask = init_mask_guide(cfg)
        mask.load_state(entries, "diff/mask/")
    return cfg, unet, text, mask
