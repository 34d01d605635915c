"""Acceptance criteria, one PASS/FAIL line each.

Criteria 1-3 re-run the relevant unit tests in a subprocess and check their
runtime budgets.  Criteria 4-7 train real models on the 8-clip toy set; a
criterion passes on at least 2 of the seeds {0, 1, 2}, and seed 2 is only
trained when seeds 0 and 1 disagree on some criterion.
"""

import json
import subprocess
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pytest

from egoexo import cli
from egoexo import diffusion as D
from egoexo import io as exio
from egoexo import metrics
from egoexo import segnet
from egoexo import synthworld as sw
from egoexo import training as tr

pytestmark = pytest.mark.acceptance

HERE = Path(__file__).parent
SEEDS = (0, 1, 2)
N_CLIPS, N_FRAMES, RES = 8, 8, 32
SEG_STEPS = 1200
DIFF1_STEPS = 3000
DIFF2_STEPS = 1500
DDIM_STEPS = 20
# narrower than the library default to fit the CPU budget
DIFF_CFG = D.DiffConfig(widths=(64, 64, 128))

LINES = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)


def _pytest(*targets, extra=()):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *extra, *targets],
                          cwd=HERE.parent, capture_output=True, text=True)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, time.perf_counter() - t0, tail


def test_criterion_1_gradients():
    ok, dt, tail = _pytest("tests/test_tensor.py", "tests/test_segnet.py::test_end_to_end_gradient",
                           "tests/test_diffusion.py::test_end_to_end_gradient", extra=("-k", "grad"))
    report(1, ok and dt < 120, f"gradchecks ({tail}) in {dt:.1f}s, budget 120s")
    assert ok and dt < 120


def test_criterion_2_invariants():
    ok, dt, tail = _pytest(
        "tests/test_tensor.py::test_softmax_normalises",
        "tests/test_segnet.py::test_memory_read_normalised",
        "tests/test_segnet.py::test_blend_endpoints_are_passthrough",
        "tests/test_segnet.py::test_bank_capacity_and_pinning",
        "tests/test_diffusion.py::test_latent_exact_inversion",
        "tests/test_diffusion.py::test_ddim_determinism_and_first_frame",
        "tests/test_diffusion.py::test_zero_init_identity",
        "tests/test_training.py::test_diffusion_phases",
    )
    report(2, ok and dt < 60, f"invariants ({tail}) in {dt:.1f}s, budget 60s")
    assert ok and dt < 60


def test_criterion_3_metric_oracles():
    ok, dt, tail = _pytest("tests/test_metrics.py::test_mask_metrics_match_oracle",
                           "tests/test_metrics.py::test_frame_metrics_match_oracle")
    report(3, ok and dt < 30, f"20-seed oracles ({tail}) in {dt:.1f}s, budget 30s")
    assert ok and dt < 30


# ---------------------------------------------------------------------------
# training-based criteria
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    seg_iou_first: float
    seg_iou_rest: float
    psnr_nomask: float
    psnr_mask: float
    psnr_oracle: float
    psnr_pred: float
    psnr_copy: float
    minutes: float

    def numbers(self):
        return [self.seg_iou_first, self.seg_iou_rest, self.psnr_nomask, self.psnr_mask, self.psnr_oracle,
                self.psnr_pred, self.psnr_copy]


def _mean_psnr(clips, data):
    return float(np.mean([metrics.evaluate_frames(c, s.ego_clip)[1].psnr for c, s in zip(clips, data)]))


def _cli_psnr(root, args, data_path, data):
    pred = root / args[0]
    assert cli.main(["infer", *args[1:], "--data", str(data_path), "--steps", str(DDIM_STEPS), "--seed", "0",
                     "--out", str(pred)]) == 0
    return cli.evaluate_run(pred, data, pred / "report")["generation"]["psnr"]


def run_seed(seed, root, seg_steps=SEG_STEPS, diff_steps=(DIFF1_STEPS, DIFF2_STEPS), diff_cfg=DIFF_CFG,
             seg_cfg=None):
    t0 = time.perf_counter()
    root = Path(root)
    ck = root / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    data = sw.generate_dataset(seed, N_CLIPS, N_FRAMES, RES)
    data_path = root / "data.exgn"
    sw.write_dataset(data, data_path)

    seg_tc = tr.TrainConfig(steps=seg_steps, batch_size=4, learning_rate=1e-3, seed=seed,
                            checkpoint_path=str(ck / "seg.exgn"))
    seg_ps, _ = tr.train_segnet(data, seg_tc, seg_cfg or segnet.SegConfig())
    first, rest = [], []
    for s in data:
        pred = segnet.rollout(s.exo_clip, s.exo_masks, s.ego_clip[0], seg_ps, seg_cfg or segnet.SegConfig())
        rows, _ = metrics.evaluate_masks(pred, s.ego_masks)
        fg = [r["iou"] for r in rows if r["class"] == "fg"]
        first.append(fg[0])
        rest.append(np.mean(fg[1:]))

    dtc = tr.DiffTrainConfig(batch_size=4, learning_rate=1e-3, seed=seed)
    unet, text, _ = tr.train_diffusion_phase1(
        data, replace(dtc, steps=diff_steps[0], checkpoint_path=str(ck / "diff1.exgn")), diff_cfg)
    mask, _ = tr.train_diffusion_phase2(
        data, replace(dtc, steps=diff_steps[1], checkpoint_path=str(ck / "diff2.exgn")), diff_cfg, unet, text)
    sched = D.make_schedule(diff_cfg.T, diff_cfg.beta_start, diff_cfg.beta_end)
    nomask = [D.ddim_sample(s.ego_clip[0], s.tokens, None, unet, None, text, sched, diff_cfg, DDIM_STEPS, 0,
                            n_frames=N_FRAMES) for s in data]
    withmask = [D.ddim_sample(s.ego_clip[0], s.tokens, s.ego_masks, unet, mask, text, sched, diff_cfg, DDIM_STEPS, 0)
                for s in data]

    diff2 = str(ck / "diff2.exgn")
    oracle = _cli_psnr(root, ["oracle", "--diff", diff2, "--oracle-masks"], data_path, data)
    predicted = _cli_psnr(root, ["predicted", "--diff", diff2, "--seg", str(ck / "seg.exgn")], data_path, data)
    copy = _mean_psnr([np.repeat(s.ego_clip[:1], N_FRAMES, axis=0) for s in data], data)
    res = SeedResult(seed, float(np.mean(first)), float(np.mean(rest)), _mean_psnr(nomask, data),
                     _mean_psnr(withmask, data), oracle, predicted, copy, (time.perf_counter() - t0) / 60)
    (root / "result.json").write_text(json.dumps(res.__dict__, indent=2))
    print(f"  seed {seed}: {res}")
    return res


class Runs:
    def __init__(self, root):
        self.root = Path(root)
        self.cache = {}

    def get(self, seed):
        if seed not in self.cache:
            self.cache[seed] = run_seed(seed, self.root / f"seed{seed}")
        return self.cache[seed]

    def two_of_three(self, check):
        """Seeds 0 and 1 first; seed 2 only decides a split."""
        verdicts = {s: check(self.get(s)) for s in SEEDS[:2]}
        if len(set(verdicts.values())) == 2:
            verdicts[SEEDS[2]] = check(self.get(SEEDS[2]))
        return sum(verdicts.values()) >= 2, verdicts


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def _fmt(verdicts):
    return " ".join(f"seed{s}={'ok' if v else 'no'}" for s, v in verdicts.items())


def test_criterion_4_segmentation_overfit(runs):
    ok, v = runs.two_of_three(lambda r: r.seg_iou_first >= 0.9 and r.seg_iou_rest >= 0.5)
    detail = "; ".join(f"seed{s} IoU f1 {runs.get(s).seg_iou_first:.3f} f2-8 {runs.get(s).seg_iou_rest:.3f}"
                       for s in v)
    report(4, ok, f"{detail} (need >=0.9 / >=0.5; {_fmt(v)})")
    assert ok


def test_criterion_5_mask_conditioning(runs):
    ok, v = runs.two_of_three(lambda r: r.psnr_mask > r.psnr_nomask)
    detail = "; ".join(f"seed{s} PSNR mask {runs.get(s).psnr_mask:.3f} vs none {runs.get(s).psnr_nomask:.3f}"
                       for s in v)
    report(5, ok, f"{detail} ({_fmt(v)})")
    assert ok


def test_criterion_6_pipeline_ordering(runs):
    ok, v = runs.two_of_three(lambda r: r.psnr_oracle >= r.psnr_pred and min(r.psnr_oracle, r.psnr_pred) > r.psnr_copy)
    detail = "; ".join(f"seed{s} PSNR oracle {runs.get(s).psnr_oracle:.3f} pred {runs.get(s).psnr_pred:.3f} "
                       f"copy {runs.get(s).psnr_copy:.3f}" for s in v)
    report(6, ok, f"{detail} ({_fmt(v)})")
    assert ok


def test_criterion_7_reproducibility(runs, tmp_path):
    first = runs.get(0)
    again = run_seed(0, tmp_path / "rerun")
    same = first.numbers() == again.numbers()
    ck = lambda root, name: exio.load(Path(root) / "checkpoints" / name)
    same_ck = all(
        all(np.array_equal(a[k], b[k]) for k in a) and a.keys() == b.keys()
        for a, b in ((ck(runs.root / "seed0", n), ck(tmp_path / "rerun", n))
                     for n in ("seg.exgn", "diff1.exgn", "diff2.exgn")))
    report(7, same and same_ck, f"seed 0 rerun: metrics identical={same}, checkpoints identical={same_ck}")
    assert same and same_ck
