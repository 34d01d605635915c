"""Cross-view hand-object mask prediction network.

Everything is batched over clips: frames are ``[B,3,H,W]`` and all clips in
a batch advance through time together, so one :class:`MemoryBank` holds
``[B,...]`` keys and values.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .nn import ParamStore
from .tensor import Tensor


@dataclass
class SegConfig:
    d4: int = 32
    d8: int = 64
    d16: int = 96
    dk: int = 64
    dv: int = 64
    capacity: int = 6
    mask_widths: tuple = (16, 32, 64)
    dec_widths: tuple = (64, 48, 32)
    cbam_reduction: int = 8

    def to_meta(self) -> np.ndarray:
        return np.array([self.d4, self.d8, self.d16, self.dk, self.dv, self.capacity,
                         *self.mask_widths, *self.dec_widths, self.cbam_reduction], dtype=np.float32)

    @classmethod
    def from_meta(cls, meta) -> "SegConfig":
        m = [int(v) for v in meta]
        return cls(m[0], m[1], m[2], m[3], m[4], m[5], tuple(m[6:9]), tuple(m[9:12]), m[12])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _add_res(ps, name, c):
    nn.add_conv(ps, f"{name}.c1", c, c)
    nn.add_norm(ps, f"{name}.n1", c)
    nn.add_conv(ps, f"{name}.c2", c, c)
    nn.add_norm(ps, f"{name}.n2", c)


def _add_conv_norm(ps, name, cin, cout, k=3):
    nn.add_conv(ps, name, cin, cout, k)
    nn.add_norm(ps, f"{name}.n", cout)


def init_params(cfg: SegConfig, seed: int = 0) -> ParamStore:
    ps = ParamStore(seed)
    # image encoder: stride pattern 4 / 2 / 2
    _add_conv_norm(ps, "enc.stem", 3, cfg.d4)
    _add_conv_norm(ps, "enc.s1.down", cfg.d4, cfg.d4)
    for i in range(2):
        _add_res(ps, f"enc.s1.r{i}", cfg.d4)
    _add_conv_norm(ps, "enc.s2.down", cfg.d4, cfg.d8)
    for i in range(2):
        _add_res(ps, f"enc.s2.r{i}", cfg.d8)
    _add_conv_norm(ps, "enc.s3.down", cfg.d8, cfg.d16)
    for i in range(2):
        _add_res(ps, f"enc.s3.r{i}", cfg.d16)
    # mask encoder: four stride-2 convs to H/16, one residual block
    widths = (6,) + tuple(cfg.mask_widths) + (cfg.d16,)
    for i in range(4):
        _add_conv_norm(ps, f"menc.c{i}", widths[i], widths[i + 1])
    _add_res(ps, "menc.r0", cfg.d16)
    # CBAM
    hidden = max(cfg.d16 // cfg.cbam_reduction, 1)
    nn.add_linear(ps, "cbam.mlp1", cfg.d16, hidden)
    nn.add_linear(ps, "cbam.mlp2", hidden, cfg.d16)
    nn.add_conv(ps, "cbam.spatial", 2, 1, k=7)
    # memory projections
    nn.add_linear(ps, "mem.wq", cfg.d16, cfg.dk, bias=False)
    nn.add_linear(ps, "mem.wk", cfg.d16, cfg.dk, bias=False)
    nn.add_linear(ps, "mem.wv", cfg.d16, cfg.dv, bias=False)
    nn.add_linear(ps, "mem.wout", cfg.dv, cfg.dv, bias=False)
    # decoder
    skips = (cfg.d16, cfg.d8, cfg.d4)
    cin = cfg.dv
    for i, (s, w) in enumerate(zip(skips, cfg.dec_widths)):
        _add_conv_norm(ps, f"dec.b{i}.c1", cin + s, w)
        _add_conv_norm(ps, f"dec.b{i}.c2", w, w)
        cin = w
    nn.add_conv(ps, "dec.head", cin, 3, k=1)
    return ps


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _conv_norm_relu(ps, name, x, stride=1):
    return T.relu(nn.norm(ps, f"{name}.n", nn.conv(ps, name, x, stride)))


def _res(ps, name, x):
    y = T.relu(nn.norm(ps, f"{name}.n1", nn.conv(ps, f"{name}.c1", x)))
    y = nn.norm(ps, f"{name}.n2", nn.conv(ps, f"{name}.c2", y))
    return T.relu(T.add(x, y))


def _check_res(x):
    h, w = x.shape[-2:]
    if h % 16 or w % 16:
        raise ValueError(f"frame size {h}x{w} must be divisible by 16")


def encode_image(frames, ps: ParamStore):
    """Shared image encoder; returns (f4, f8, f16) feature maps."""
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    _check_res(x)
    x = _conv_norm_relu(ps, "enc.stem", x, stride=2)
    x = _conv_norm_relu(ps, "enc.s1.down", x, stride=2)
    for i in range(2):
        x = _res(ps, f"enc.s1.r{i}", x)
    f4 = x
    x = _conv_norm_relu(ps, "enc.s2.down", x, stride=2)
    for i in range(2):
        x = _res(ps, f"enc.s2.r{i}", x)
    f8 = x
    x = _conv_norm_relu(ps, "enc.s3.down", x, stride=2)
    for i in range(2):
        x = _res(ps, f"enc.s3.r{i}", x)
    f16 = x
    if squeeze:
        return tuple(f.reshape(f.shape[1:]) for f in (f4, f8, f16))
    return f4, f8, f16


def one_hot(mask) -> np.ndarray:
    """Class-id map ``[...,H,W]`` to one-hot ``[...,3,H,W]``."""
    m = np.asarray(mask)
    oh = (m[..., None, :, :] == np.arange(3).reshape(3, 1, 1)).astype(T.default_dtype())
    return oh


def cbam(x: Tensor, ps: ParamStore, return_gates=False):
    """Channel attention then spatial attention (both sigmoid-gated)."""
    b, c, h, w = x.shape
    avg = T.mean(x, axis=(2, 3))
    mx = T.amax(T.reshape(x, (b, c, h * w)), axis=2)

    def mlp(v):
        return nn.linear(ps, "cbam.mlp2", T.relu(nn.linear(ps, "cbam.mlp1", v)))

    ch_gate = T.sigmoid(T.add(mlp(avg), mlp(mx)))
    x = T.mul(x, T.reshape(ch_gate, (b, c, 1, 1)))
    pooled = T.concat([T.mean(x, axis=1, keepdims=True), T.amax(x, axis=1, keepdims=True)], axis=1)
    sp_gate = T.sigmoid(nn.conv(ps, "cbam.spatial", pooled))
    out = T.mul(x, sp_gate)
    if return_gates:
        return out, ch_gate, sp_gate
    return out


def encode_mask(frames, mask_onehot, image_f16, ps: ParamStore, return_gates=False):
    """Mask feature: conv stack over [frame, one-hot mask], CBAM-fused with the image feature."""
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    m = mask_onehot if isinstance(mask_onehot, Tensor) else Tensor(mask_onehot)
    squeeze = x.ndim == 3
    if squeeze:
        x, m = x.reshape((1,) + x.shape), m.reshape((1,) + m.shape)
        image_f16 = image_f16.reshape((1,) + image_f16.shape)
    if x.shape[0] != m.shape[0] or x.shape[2:] != m.shape[2:] or m.shape[1] != 3:
        raise ValueError(f"frame {x.shape} and one-hot mask {m.shape} do not match")
    y = T.concat([x, m], axis=1)
    for i in range(4):
        y = _conv_norm_relu(ps, f"menc.c{i}", y, stride=2)
    y = _res(ps, "menc.r0", y)
    if y.shape != image_f16.shape:
        raise ValueError(f"mask feature {y.shape} does not match image feature {image_f16.shape}")
    res = cbam(T.add(image_f16, y), ps, return_gates)
    if squeeze:
        if return_gates:
            return (res[0].reshape(res[0].shape[1:]),) + res[1:]
        return res.reshape(res.shape[1:])
    return res


# ---------------------------------------------------------------------------
# memory
# ---------------------------------------------------------------------------

@dataclass
class MemoryEntry:
    view: str
    frame_index: int
    key: Tensor
    value: Tensor


@dataclass
class MemoryBank:
    capacity_per_view: int = 6
    entries: list = field(default_factory=list)

    def count(self, view):
        return sum(e.view == view for e in self.entries)

    def frames(self, view):
        return [e.frame_index for e in self.entries if e.view == view]

    def add(self, entry: MemoryEntry):
        if entry.view not in ("ego", "exo"):
            raise ValueError(f"unknown view {entry.view!r}")
        prev = self.frames(entry.view)
        if prev and entry.frame_index <= prev[-1]:
            raise ValueError(f"{entry.view} frame {entry.frame_index} stored after frame {prev[-1]}")
        self.entries.append(entry)
        if self.count(entry.view) > self.capacity_per_view:
            first = prev[0] if prev else entry.frame_index
            for i, e in enumerate(self.entries):
                if e.view == entry.view and e.frame_index != first:
                    del self.entries[i]
                    break


def _project(ps, name, x):
    # [B,C,h,w] -> [B,D,h,w] through a bias-free channel map
    return nn.channel_linear(ps, name, x)


def memory_store(bank: MemoryBank, view: str, frame_index: int, image_f16, value_feature, ps: ParamStore):
    key = _project(ps, "mem.wk", image_f16)
    value = _project(ps, "mem.wv", value_feature)
    bank.add(MemoryEntry(view, frame_index, key, value))


def memory_read(query_f16, bank: MemoryBank, ps: ParamStore, return_weights=False):
    """Location-aligned attention over bank entries, softmax across entries."""
    if not bank.entries:
        raise ValueError("memory read from an empty bank")
    q = _project(ps, "mem.wq", query_f16)  # [B,Dk,h,w]
    b, dk, h, w = q.shape
    keys = T.stack([e.key for e in bank.entries], axis=1)  # [B,E,Dk,h,w]
    vals = T.stack([e.value for e in bank.entries], axis=1)  # [B,E,Dv,h,w]
    logits = T.scale(T.tsum(T.mul(T.reshape(q, (b, 1, dk, h, w)), keys), axis=2), 1.0 / math.sqrt(dk))
    attn = T.softmax(logits, axis=1)  # [B,E,h,w]
    e = attn.shape[1]
    mixed = T.tsum(T.mul(T.reshape(attn, (b, e, 1, h, w)), vals), axis=1)
    z = _project(ps, "mem.wout", mixed)
    return (z, attn) if return_weights else z


def blend(z_ego_query, z_exo_query, alpha: float):
    """``alpha * Z' + (1 - alpha) * Z``; the endpoints pass one input through untouched."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    if z_ego_query.shape != z_exo_query.shape:
        raise ValueError("blend inputs differ in shape")
    if alpha == 1.0:
        return z_ego_query
    if alpha == 0.0:
        return z_exo_query
    return T.add(T.scale(z_ego_query, alpha), T.scale(z_exo_query, 1.0 - alpha))


def decode_mask(zpp, feats, ps: ParamStore):
    """Three skip-fused blocks (f16, f8, f4), 1x1 head, final 4x bilinear upsample."""
    f4, f8, f16 = feats
    squeeze = zpp.ndim == 3
    if squeeze:
        zpp = zpp.reshape((1,) + zpp.shape)
        f4, f8, f16 = (f.reshape((1,) + f.shape) for f in (f4, f8, f16))
    x = zpp
    for i, skip in enumerate((f16, f8, f4)):
        if x.shape[2:] != skip.shape[2:]:
            raise ValueError(f"decoder block {i}: {x.shape} vs skip {skip.shape}")
        x = T.concat([x, skip], axis=1)
        x = _conv_norm_relu(ps, f"dec.b{i}.c1", x)
        x = _conv_norm_relu(ps, f"dec.b{i}.c2", x)
        if i < 2:
            x = T.upsample_bilinear(x, 2)
    logits = T.upsample_bilinear(nn.conv(ps, "dec.head", x), 4)
    return logits.reshape(logits.shape[1:]) if squeeze else logits


def argmax_mask(logits) -> np.ndarray:
    """Class map from logits ``[...,3,H,W]``; ties go to the lower class id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=-3).astype(np.uint8)


# ---------------------------------------------------------------------------
# per-frame step and clip-level passes
# ---------------------------------------------------------------------------

def predict_step(exo_frame, exo_mask, ego_frame, bank: MemoryBank, ps: ParamStore, alpha: float,
                 frame_index: int, ego_mask=None, feats=None):
    """One auto-regressive step for a batch of clips.

    ``exo_mask``/``ego_mask`` are class maps ``[B,H,W]``.  When ``ego_mask``
    is given (teacher forcing) it replaces the prediction as the stored ego
    memory value.  ``feats`` may carry precomputed encoder outputs
    ``(exo_feats, ego_feats, exo_value)`` to avoid re-encoding.
    Returns ego logits ``[B,3,H,W]``; the bank is updated in place.
    """
    exo_frame = exo_frame if isinstance(exo_frame, Tensor) else Tensor(exo_frame)
    ego_frame = ego_frame if isinstance(ego_frame, Tensor) else Tensor(ego_frame)
    if feats is None:
        exo_feats = encode_image(exo_frame, ps)
        ego_feats = encode_image(ego_frame, ps)
        exo_value = encode_mask(exo_frame, one_hot(exo_mask), exo_feats[2], ps)
    else:
        exo_feats, ego_feats, exo_value = feats
    x16, g16 = exo_feats[2], ego_feats[2]
    memory_store(bank, "exo", frame_index, x16, exo_value, ps)
    z = memory_read(x16, bank, ps) if alpha < 1.0 else None
    zp = memory_read(g16, bank, ps) if alpha > 0.0 else None
    zpp = blend(zp if zp is not None else z, z if z is not None else zp, alpha)
    logits = decode_mask(zpp, ego_feats, ps)
    stored = argmax_mask(logits) if ego_mask is None else np.asarray(ego_mask)
    ego_value = encode_mask(ego_frame, one_hot(stored), g16, ps)
    memory_store(bank, "ego", frame_index, g16, ego_value, ps)
    return logits


def _split(feats, b, n):
    # [(B*N),C,h,w] features -> per-frame list of [B,C,h,w]
    out = []
    for t in range(n):
        out.append(tuple(T.getitem(f, slice(t * b, (t + 1) * b)) for f in feats))
    return out


def forward_clips(exo, exo_masks, ego, ps: ParamStore, cfg: SegConfig, alphas, teacher_masks=None,
                  visible=None):
    """Run the auto-regressive pass over whole clips.

    ``exo``/``ego``: ``[B,N,3,H,W]`` arrays (unobserved ego frames already zero),
    ``exo_masks``: ``[B,N,H,W]``.  ``alphas``: per-frame blend weights.
    ``teacher_masks``/``visible``: ground-truth ego masks used as memory values
    on frames flagged visible.  Returns a list of per-frame logits ``[B,3,H,W]``.
    """
    b, n = exo.shape[:2]
    res = exo.shape[-2:]
    # time-major so frame t occupies rows [t*B, (t+1)*B)
    exo_tm = np.ascontiguousarray(np.swapaxes(exo, 0, 1)).reshape((n * b, 3) + res)
    ego_tm = np.ascontiguousarray(np.swapaxes(ego, 0, 1)).reshape((n * b, 3) + res)
    exo_m_tm = np.ascontiguousarray(np.swapaxes(exo_masks, 0, 1)).reshape((n * b,) + res)
    feats = encode_image(Tensor(np.concatenate([exo_tm, ego_tm])), ps)
    exo_f = tuple(T.getitem(f, slice(0, n * b)) for f in feats)
    ego_f = tuple(T.getitem(f, slice(n * b, 2 * n * b)) for f in feats)
    exo_val = encode_mask(Tensor(exo_tm), one_hot(exo_m_tm), exo_f[2], ps)
    exo_frames = _split(exo_f, b, n)
    ego_frames = _split(ego_f, b, n)
    exo_vals = [T.getitem(exo_val, slice(t * b, (t + 1) * b)) for t in range(n)]
    bank = MemoryBank(cfg.capacity)
    outs = []
    for t in range(n):
        gt = None
        if teacher_masks is not None and visible is not None and visible[t]:
            gt = teacher_masks[:, t]
        logits = predict_step(exo[:, t], None, ego[:, t], bank, ps, alphas[t], t + 1, ego_mask=gt,
                              feats=(exo_frames[t], ego_frames[t], exo_vals[t]))
        outs.append(logits)
    return outs


def rollout(exo_clip, exo_masks, g1, ps: ParamStore, cfg: SegConfig) -> np.ndarray:
    """Predict ego masks ``[N,H,W]`` (or ``[B,N,H,W]``) from the exo clip and the first ego frame."""
    exo_clip = np.asarray(exo_clip)
    single = exo_clip.ndim == 4
    if single:
        exo_clip, exo_masks, g1 = exo_clip[None], np.asarray(exo_masks)[None], np.asarray(g1)[None]
    b, n = exo_clip.shape[:2]
    ego = np.zeros_like(exo_clip)
    ego[:, 0] = g1
    alphas = [1.0] + [0.0] * (n - 1)
    with T.no_grad():
        outs = forward_clips(exo_clip, exo_masks, ego, ps, cfg, alphas)
    pred = np.stack([argmax_mask(o) for o in outs], axis=1)
    return pred[0] if single else pred


def checkpoint_entries(ps: ParamStore, cfg: SegConfig) -> dict:
    entries = {f"seg/{k}": v for k, v in ps.state().items()}
    entries["seg/meta"] = cfg.to_meta()
    return entries


def from_checkpoint(entries: dict):
    if "seg/meta" not in entries:
        raise ValueError("checkpoint has no seg/meta entry")
    cfg = SegConfig.from_meta(entries["seg/meta"])
    ps = init_params(cfg, 0)
    ps.load_state(entries, prefix="seg/")
    return ps, cfg


def config_dict(cfg: SegConfig) -> dict:
    return asdict(cfg)
