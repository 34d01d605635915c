import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egoexo import io as exio
from egoexo import segnet
from egoexo import synthworld as sw
from egoexo import tensor as T
from egoexo.segnet import MemoryBank, MemoryEntry, SegConfig
from egoexo.tensor import Tensor
from egoexo.training import TrainConfig, seg_clip_loss
from helpers import param_gradcheck

TINY = SegConfig(d4=8, d8=8, d16=16, dk=8, dv=8, capacity=3, mask_widths=(8, 8, 8), dec_widths=(8, 8, 8))


@pytest.fixture(scope="module")
def tiny():
    return segnet.init_params(TINY, 0)


@pytest.fixture(scope="module")
def clip():
    return sw.generate_dataset(3, 2, 3, 32)


def test_param_registry():
    ps = segnet.init_params(SegConfig(), 0)
    assert len(set(ps.names())) == len(ps)
    assert ps.count() == 1_112_482
    for name in ("mem.wq.w", "mem.wk.w", "mem.wv.w", "mem.wout.w"):
        assert name in ps and name.replace(".w", ".b") not in ps


def test_encoder_shapes(tiny):
    f4, f8, f16 = segnet.encode_image(np.zeros((2, 3, 32, 32), np.float32), tiny)
    assert f4.shape == (2, 8, 8, 8) and f8.shape == (2, 8, 4, 4) and f16.shape == (2, 16, 2, 2)
    f4, _, _ = segnet.encode_image(np.zeros((3, 32, 32), np.float32), tiny)
    assert f4.shape == (8, 8, 8)
    with pytest.raises(ValueError):
        segnet.encode_image(np.zeros((1, 3, 24, 24), np.float32), tiny)


def test_one_hot():
    m = np.array([[0, 1], [2, 1]])
    oh = segnet.one_hot(m)
    assert oh.shape == (3, 2, 2)
    assert np.array_equal(oh.argmax(0), m) and np.all(oh.sum(0) == 1)


def test_mask_encoder_and_cbam(tiny, rng):
    frames = rng.random((2, 3, 32, 32)).astype(np.float32)
    masks = rng.integers(0, 3, (2, 32, 32))
    f16 = segnet.encode_image(frames, tiny)[2]
    out, ch, sp = segnet.encode_mask(frames, segnet.one_hot(masks), f16, tiny, return_gates=True)
    assert out.shape == f16.shape
    assert ch.shape == (2, 16) and sp.shape == (2, 1, 2, 2)
    assert np.all((ch.data > 0) & (ch.data < 1)) and np.all((sp.data > 0) & (sp.data < 1))
    with pytest.raises(ValueError):
        segnet.encode_mask(frames, segnet.one_hot(masks[:, :16, :16]), f16, tiny)


def _entry(view, n, c=2):
    z = Tensor(np.full((1, c, 2, 2), float(n)))
    return MemoryEntry(view, n, z, z)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.lists(st.sampled_from(["ego", "exo"]), min_size=1, max_size=30))
def test_bank_capacity_and_pinning(cap, views):
    bank = MemoryBank(cap)
    counter = {"ego": 0, "exo": 0}
    for v in views:
        counter[v] += 1
        bank.add(_entry(v, counter[v]))
        for view in ("ego", "exo"):
            frames = bank.frames(view)
            assert len(frames) <= cap
            if counter[view]:
                assert frames[0] == 1  # frame 1 never evicted
                assert frames[-1] == counter[view]
                assert frames == sorted(frames)


def test_bank_rejects_out_of_order():
    bank = MemoryBank(3)
    bank.add(_entry("exo", 2))
    with pytest.raises(ValueError):
        bank.add(_entry("exo", 2))
    with pytest.raises(ValueError):
        bank.add(_entry("side", 3))


def test_memory_read_normalised(tiny, rng):
    bank = MemoryBank(3)
    for n in range(1, 5):
        for view in ("exo", "ego"):
            segnet.memory_store(bank, view, n, Tensor(rng.standard_normal((2, 16, 2, 2))),
                                Tensor(rng.standard_normal((2, 16, 2, 2))), tiny)
    z, attn = segnet.memory_read(Tensor(rng.standard_normal((2, 16, 2, 2))), bank, tiny, return_weights=True)
    assert z.shape == (2, 8, 2, 2)
    assert attn.shape == (2, 6, 2, 2)
    assert np.abs(attn.data.sum(axis=1) - 1).max() < 1e-6
    with pytest.raises(ValueError):
        segnet.memory_read(Tensor(np.zeros((1, 16, 2, 2))), MemoryBank(3), tiny)


def test_blend_endpoints_are_passthrough(rng):
    a = Tensor(rng.standard_normal((1, 4, 2, 2)))
    b = Tensor(rng.standard_normal((1, 4, 2, 2)))
    assert segnet.blend(a, b, 1.0) is a
    assert segnet.blend(a, b, 0.0) is b
    mid = segnet.blend(a, b, 0.25).data
    assert np.allclose(mid, 0.25 * a.data + 0.75 * b.data, atol=1e-6)
    with pytest.raises(ValueError):
        segnet.blend(a, b, 1.5)
    with pytest.raises(ValueError):
        segnet.blend(a, Tensor(np.zeros((1, 4, 1, 1))), 0.5)


def test_decoder_output_shape(tiny):
    feats = segnet.encode_image(np.zeros((2, 3, 32, 32), np.float32), tiny)
    logits = segnet.decode_mask(Tensor(np.zeros((2, 8, 2, 2))), feats, tiny)
    assert logits.shape == (2, 3, 32, 32)


def test_argmax_ties_go_low():
    logits = np.zeros((3, 2, 2))
    logits[2, 0, 0] = 1.0
    assert np.array_equal(segnet.argmax_mask(logits), [[2, 0], [0, 0]])


def test_predict_step_bank_bookkeeping(tiny, clip):
    s = clip[0]
    bank = MemoryBank(TINY.capacity)
    for t in range(3):
        segnet.predict_step(s.exo_clip[t:t + 1], s.exo_masks[t:t + 1], s.ego_clip[t:t + 1], bank, tiny,
                            1.0 if t == 0 else 0.0, t + 1)
        assert bank.count("exo") == t + 1 and bank.count("ego") == t + 1


def test_exo_entry_stored_before_read(tiny, clip):
    # with an empty bank and alpha 0 the read must already see the current exo entry
    s = clip[0]
    bank = MemoryBank(3)
    logits = segnet.predict_step(s.exo_clip[:1], s.exo_masks[:1], s.ego_clip[:1], bank, tiny, 0.0, 1)
    assert logits.shape == (1, 3, 32, 32)


def test_rollout_contract(tiny, clip, monkeypatch):
    s = clip[0]
    pred = segnet.rollout(s.exo_clip, s.exo_masks, s.ego_clip[0], tiny, TINY)
    assert pred.shape == (3, 32, 32) and pred.dtype == np.uint8 and pred.max() <= 2
    assert np.array_equal(pred, segnet.rollout(s.exo_clip, s.exo_masks, s.ego_clip[0], tiny, TINY))
    one = segnet.rollout(s.exo_clip[:1], s.exo_masks[:1], s.ego_clip[0], tiny, TINY)
    assert one.shape == (1, 32, 32)
    # frame 1 is ego-query only (alpha 1), later frames exo-query only (alpha 0)
    calls = []
    real = segnet.memory_read

    def spy(q, bank, ps, return_weights=False):
        calls.append(q)
        return real(q, bank, ps, return_weights)

    monkeypatch.setattr(segnet, "memory_read", spy)
    segnet.rollout(s.exo_clip, s.exo_masks, s.ego_clip[0], tiny, TINY)
    assert len(calls) == 3


def test_rollout_only_uses_first_ego_frame(tiny, clip):
    s = clip[0]
    a = segnet.rollout(s.exo_clip, s.exo_masks, s.ego_clip[0], tiny, TINY)
    b = segnet.rollout(s.exo_clip, s.exo_masks, s.ego_clip[0].copy(), tiny, TINY)
    assert np.array_equal(a, b)
    # the signature takes g1 alone, so later ego frames cannot reach the model
    import inspect

    assert list(inspect.signature(segnet.rollout).parameters)[:3] == ["exo_clip", "exo_masks", "g1"]


def test_checkpoint_roundtrip(tiny, tmp_path):
    exio.save(tmp_path / "seg.exgn", segnet.checkpoint_entries(tiny, TINY))
    entries = exio.load(tmp_path / "seg.exgn")
    assert all(k.startswith("seg/") for k in entries)
    ps, cfg = segnet.from_checkpoint(entries)
    assert cfg == TINY and ps.digest() == tiny.digest()


def test_end_to_end_gradient():
    """Every parameter tensor of a 2-frame instance, 64-bit, rel err < 1e-2."""
    # both frames visible: a zeroed frame gives constant groups whose rounding noise
    # each norm amplifies by 1/sqrt(eps), which swamps central differences
    data = sw.generate_dataset(11, 1, 2, 32)
    s = data[0]
    exo, exo_m, ego, ego_m = s.exo_clip[None], s.exo_masks[None], s.ego_clip[None], s.ego_masks[None]
    tc = TrainConfig(steps=1)
    with T.check_mode():
        ps = segnet.init_params(TINY, 1).astype(np.float64)

        def loss():
            return seg_clip_loss(ps, TINY, exo.astype(np.float64), exo_m, ego.astype(np.float64), ego_m, 0.5,
                                 [True, True], tc)

        assert param_gradcheck(ps, loss) < 1e-2
