"""Procedural paired ego/exo toy world with exact hand-object masks.

The world is the unit square.  A disc (the hand) moves along a scripted
path; an axis-aligned rectangle (the object) follows it while attached.
The exo camera always sees the whole square.  The ego camera is a square
viewport of side 0.5 that tracks the hand with a one-frame lag.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import io as exio


class Action(IntEnum):
    push_left = 0
    push_right = 1
    pick_up = 2
    put_down = 3
    stir = 4
    idle = 5


VOCAB = [
    "<pad>", "the", "hand", "pushes", "object", "left", "right", "picks",
    "up", "puts", "down", "stirs", "around", "rests", "near",
]
_WORD_ID = {w: i for i, w in enumerate(VOCAB)}
TEMPLATES = {
    Action.push_left: "the hand pushes the object left",
    Action.push_right: "the hand pushes the object right",
    Action.pick_up: "the hand picks up the object",
    Action.put_down: "the hand puts down the object",
    Action.stir: "the hand stirs around the object",
    Action.idle: "the hand rests near the object",
}
MAX_TOKENS = 8

HAND_COLOR = np.array([0.95, 0.78, 0.62], dtype=np.float32)
OBJECT_COLOR = np.array([0.12, 0.30, 0.85], dtype=np.float32)
EGO_SIDE = 0.5
MAX_JITTER = 0.01  # per frame, euclidean


@dataclass(frozen=True)
class WorldState:
    hand_center: tuple
    hand_radius: float
    object_center: tuple
    object_half_extent: tuple
    object_attached: bool
    background_texture_seed: int


@dataclass
class PairedSample:
    ego_clip: np.ndarray  # [N,3,H,W] float32 in [0,1]
    exo_clip: np.ndarray
    ego_masks: np.ndarray  # [N,H,W] uint8 in {0,1,2}
    exo_masks: np.ndarray
    tokens: np.ndarray  # int64 ids
    seed: int = 0
    action_id: int = 0
    worlds: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_frames(self):
        return self.ego_clip.shape[0]


def parse_action(action) -> Action:
    if isinstance(action, Action):
        return action
    try:
        if isinstance(action, str):
            return Action[action]
        return Action(int(action))
    except (KeyError, ValueError):
        raise ValueError(f"unknown action {action!r}") from None


def instruction_tokens(action) -> np.ndarray:
    words = TEMPLATES[parse_action(action)].split()
    return np.array([_WORD_ID[w] for w in words], dtype=np.int64)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _lerp_path(points, frames, n):
    """Piecewise-linear waypoint path through ``points`` at frame indices ``frames``."""
    idx = np.arange(n)
    pts = np.asarray(points, dtype=np.float64)
    return np.stack([np.interp(idx, frames, pts[:, 0]), np.interp(idx, frames, pts[:, 1])], axis=1)


def _script(action: Action, rng, n):
    """Return (hand waypoints [n,2], attach frame or None, detach frame or None, object center, r, half)."""
    r = rng.uniform(0.07, 0.09)
    half = (rng.uniform(0.07, 0.10), rng.uniform(0.07, 0.10))
    last = n - 1
    a = max(1, round(last / 3))
    d = max(a + 1, round(2 * last / 3)) if n > 2 else last
    gap = 0.12
    if action is Action.push_left:
        obj = np.array([rng.uniform(0.58, 0.66), rng.uniform(0.35, 0.65)])
        contact = obj + [half[0] + 0.8 * r, 0.0]
        path = _lerp_path([contact + [gap, 0], contact, contact - [0.28, 0]], [0, a, last], n)
        return path, a, None, obj, r, half
    if action is Action.push_right:
        obj = np.array([rng.uniform(0.34, 0.42), rng.uniform(0.35, 0.65)])
        contact = obj - [half[0] + 0.8 * r, 0.0]
        path = _lerp_path([contact - [gap, 0], contact, contact + [0.28, 0]], [0, a, last], n)
        return path, a, None, obj, r, half
    if action is Action.pick_up:
        obj = np.array([rng.uniform(0.35, 0.65), rng.uniform(0.55, 0.62)])
        grip = obj + [0.0, 0.8 * half[1]]
        path = _lerp_path([grip + [0, gap], grip, grip - [0, 0.26]], [0, a, last], n)
        return path, a, None, obj, r, half
    if action is Action.put_down:
        obj = np.array([rng.uniform(0.35, 0.65), rng.uniform(0.25, 0.32)])
        grip = obj + [0.0, 0.8 * half[1]]
        drop = grip + [0, 0.26]
        path = _lerp_path([grip, drop, drop + [gap, 0.02]], [0, d, last], n)
        return path, 0, d, obj, r, half
    if action is Action.stir:
        obj = np.array([rng.uniform(0.38, 0.62), rng.uniform(0.38, 0.62)])
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + np.linspace(0.0, 1.6 * np.pi, n)
        path = obj + 0.12 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return path, None, None, obj, r, half
    if action is Action.idle:
        obj = np.array([rng.uniform(0.35, 0.55), rng.uniform(0.35, 0.65)])
        rest = obj + [half[0] + r + 0.08, 0.0]
        return np.repeat(rest[None], n, axis=0), None, None, obj, r, half
    raise ValueError(f"unknown action {action!r}")


def simulate(seed: int, action, n_frames: int) -> list:
    """Deterministic trajectory of world states for one scripted action."""
    action = parse_action(action)
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(action)])
    path, attach, detach, obj, r, half = _script(action, rng, n_frames)
    tex_seed = int(rng.integers(0, 2**31 - 1))
    # jitter vectors of length <= MAX_JITTER
    ang = rng.uniform(0, 2 * np.pi, n_frames)
    mag = rng.uniform(0, MAX_JITTER, n_frames)
    jitter = np.stack([np.cos(ang), np.sin(ang)], axis=1) * mag[:, None]

    hlo, hhi = r, 1.0 - r
    olo = np.array(half)
    ohi = 1.0 - olo
    states = []
    obj_c = obj.copy()
    offset = None
    for n in range(n_frames):
        hand = np.clip(path[n] + jitter[n], hlo, hhi)
        attached = attach is not None and n >= attach and (detach is None or n < detach)
        if attached:
            if offset is None:
                offset = obj_c - hand
                # short clips can skip the contact waypoint; keep the grasp in reach
                reach = r + max(half)
                dist = float(np.hypot(*offset))
                if dist > reach:
                    offset = offset * (reach / dist)
            obj_c = np.clip(hand + offset, olo, ohi)
        else:
            offset = None
        states.append(
            WorldState(
                hand_center=(float(hand[0]), float(hand[1])),
                hand_radius=float(r),
                object_center=(float(obj_c[0]), float(obj_c[1])),
                object_half_extent=(float(half[0]), float(half[1])),
                object_attached=bool(attached),
                background_texture_seed=tex_seed,
            )
        )
    return states


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _texture_params(seed):
    rng = np.random.default_rng(seed)
    k = 6
    freq = rng.uniform(1.0, 4.0, (k, 2)) * rng.choice([-1, 1], (k, 2))
    phase = rng.uniform(0, 2 * np.pi, k)
    amp = rng.uniform(0.5, 1.0, (k, 3))
    base = rng.uniform(0.35, 0.55, 3)
    return freq, phase, amp, base


def _background(seed, wx, wy):
    freq, phase, amp, base = _texture_params(seed)
    out = np.empty((3,) + wx.shape)
    acc = [np.zeros_like(wx) for _ in range(3)]
    for f, p, a in zip(freq, phase, amp):
        wave = np.sin(2 * np.pi * (f[0] * wx + f[1] * wy) + p)
        for c in range(3):
            acc[c] += a[c] * wave
    for c in range(3):
        out[c] = base[c] + 0.05 * acc[c]
    return np.clip(out, 0.05, 0.8)


def ego_viewport(anchor) -> tuple:
    """Top-left corner of the ego viewport centred on ``anchor``, clamped to the world."""
    h = EGO_SIDE / 2
    x = min(max(anchor[0], h), 1.0 - h)
    y = min(max(anchor[1], h), 1.0 - h)
    return x - h, y - h


def render(world: WorldState, view: str, res: int, ego_anchor=None):
    """Rasterise one view; returns (frame [3,res,res] float32, mask [res,res] uint8).

    ``ego_anchor`` is the hand position the ego camera centres on (the
    previous frame's hand when rendering clips); defaults to the current hand.
    """
    if res < 16:
        raise ValueError("res must be >= 16")
    if view == "exo":
        x0, y0, side = 0.0, 0.0, 1.0
    elif view == "ego":
        x0, y0 = ego_viewport(world.hand_center if ego_anchor is None else ego_anchor)
        side = EGO_SIDE
    else:
        raise ValueError(f"unknown view {view!r}")
    centers = (np.arange(res) + 0.5) / res * side
    wx, wy = np.meshgrid(x0 + centers, y0 + centers)
    frame = _background(world.background_texture_seed, wx, wy)
    mask = np.zeros((res, res), dtype=np.uint8)
    ox, oy = world.object_center
    hx, hy = world.object_half_extent
    obj = (np.abs(wx - ox) <= hx) & (np.abs(wy - oy) <= hy)
    cx, cy = world.hand_center
    hand = (wx - cx) ** 2 + (wy - cy) ** 2 <= world.hand_radius**2
    mask[obj] = 2
    mask[hand] = 1
    frame[:, obj] = OBJECT_COLOR[:, None]
    frame[:, hand] = HAND_COLOR[:, None]
    return frame.astype(np.float32), mask


def render_clip(worlds, res: int):
    n = len(worlds)
    ego = np.empty((n, 3, res, res), np.float32)
    exo = np.empty_like(ego)
    ego_m = np.empty((n, res, res), np.uint8)
    exo_m = np.empty_like(ego_m)
    for i, w in enumerate(worlds):
        anchor = worlds[max(i - 1, 0)].hand_center
        ego[i], ego_m[i] = render(w, "ego", res, ego_anchor=anchor)
        exo[i], exo_m[i] = render(w, "exo", res)
    return ego, exo, ego_m, exo_m


def make_sample(seed: int, action, n_frames: int = 8, res: int = 32) -> PairedSample:
    action = parse_action(action)
    worlds = simulate(seed, action, n_frames)
    ego, exo, ego_m, exo_m = render_clip(worlds, res)
    return PairedSample(ego, exo, ego_m, exo_m, instruction_tokens(action), int(seed), int(action), worlds)


def sample_seed(master_seed: int, index: int) -> int:
    """Per-sample seed derived from (master seed, index) only."""
    a, b = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(2, dtype=np.uint32)
    return (int(a) << 32) | int(b)


def generate_dataset(master_seed: int, count: int, n_frames: int = 8, res: int = 32, actions=None) -> list:
    if count <= 0:
        raise ValueError("empty dataset requested")
    pool = [parse_action(a) for a in (actions or [a for a in Action if a is not Action.idle])]
    out = []
    for i in range(count):
        s = sample_seed(master_seed, i)
        out.append(make_sample(s, pool[s % len(pool)], n_frames, res))
    return out


# ---------------------------------------------------------------------------
# dataset file
# ---------------------------------------------------------------------------

def dataset_entries(samples) -> dict:
    n, _, res, _ = samples[0].ego_clip.shape
    entries = {}
    for i, s in enumerate(samples):
        entries[f"s{i}/ego"] = s.ego_clip.astype(np.float32)
        entries[f"s{i}/exo"] = s.exo_clip.astype(np.float32)
        entries[f"s{i}/ego_mask"] = s.ego_masks.astype(np.uint8)
        entries[f"s{i}/exo_mask"] = s.exo_masks.astype(np.uint8)
        entries[f"s{i}/tokens"] = np.asarray(s.tokens).astype(np.uint8)
        info = np.zeros(9, np.uint8)
        info[0] = s.action_id
        info[1:] = np.frombuffer(int(s.seed).to_bytes(8, "little"), np.uint8)
        entries[f"s{i}/info"] = info
    entries["meta"] = np.array([len(samples), n, res, len(VOCAB)], dtype=np.float32)
    return entries


def write_dataset(samples, path):
    exio.save(path, dataset_entries(samples))


def read_dataset(path) -> list:
    entries = exio.load(path)
    if "meta" not in entries:
        raise exio.FormatError("dataset has no meta entry")
    count, n, res, vocab = (int(v) for v in entries["meta"])
    out = []
    for i in range(count):
        try:
            ego, exo = entries[f"s{i}/ego"], entries[f"s{i}/exo"]
            ego_m, exo_m = entries[f"s{i}/ego_mask"], entries[f"s{i}/exo_mask"]
            tokens = entries[f"s{i}/tokens"].astype(np.int64)
            info = entries.get(f"s{i}/info", np.zeros(9, np.uint8))
        except KeyError as e:
            raise exio.FormatError(f"sample {i}: missing entry {e.args[0]}") from None
        for label, m in (("ego_mask", ego_m), ("exo_mask", exo_m)):
            bad = np.flatnonzero((m > 2).reshape(m.shape[0], -1).any(axis=1))
            if bad.size:
                raise exio.FormatError(f"sample {i} frame {bad[0]}: {label} value outside {{0,1,2}}")
        if ego.shape != (n, 3, res, res) or exo.shape != ego.shape:
            raise exio.FormatError(f"sample {i}: clip shape {ego.shape} disagrees with meta")
        if tokens.size and tokens.max() >= vocab:
            raise exio.FormatError(f"sample {i}: token id outside vocabulary")
        seed = int.from_bytes(info[1:].tobytes(), "little")
        out.append(PairedSample(ego, exo, ego_m, exo_m, tokens, seed, int(info[0])))
    return out
