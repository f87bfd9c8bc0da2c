"""Acceptance criteria 1-8.

Each test records one ``criterion N: PASS/FAIL`` line, printed immediately and
again in the terminal summary.  Run just this file with::

    pytest tests/test_acceptance.py -v
"""
import io
import json
import math
import time
from contextlib import redirect_stdout

import numpy as np
import pytest
import torch
from scipy.optimize import minimize_scalar
from scipy.stats import chisquare

from attend_segment import memory as mem
from attend_segment.agent import rollout, run_rollouts
from attend_segment.cli import main
from attend_segment.memory import GlimpseFeatures, MemoryState
from attend_segment.metrics import mean_iou, pixel_accuracy
from attend_segment.model import ActiveSegmentationNet, ModelConfig
from attend_segment.objective import ErrorMaps, LossState, bce_error_map, step_loss
from attend_segment.policy import (select_horizon, select_random, select_restricted,
                                   select_uncertainty)
from attend_segment.retina import GlimpseSpec, RetinaConfig, analytic_pixel_count, snap_location
from attend_segment.train import (TrainConfig, build_datasets, evaluate, load_checkpoint, train,
                                  validate)

RESULTS = []

# published budget table: glimpses 1..10 x (full resolution, 2 scales, 3 scales)
BUDGET_TABLE = [
    (7.0, 2.3, 1.8), (14.0, 4.6, 3.6), (21.0, 7.0, 5.4), (28.1, 9.3, 7.2), (35.1, 11.7, 9.0),
    (42.1, 14.0, 10.8), (49.2, 16.4, 12.6), (56.2, 18.7, 14.4), (63.2, 21.0, 16.2),
    (70.3, 23.4, 18.0),
]


def record(name, ok, detail):
    line = f"criterion {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1: budget arithmetic ------------------------------------------------------

def test_criterion_1_budget_arithmetic():
    start = time.perf_counter()
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(["budget"])
    rows = buf.getvalue().strip().split("\n")[1:]
    cells = np.array([[float(c.strip().rstrip("%")) for c in r.split("|")[1:]] for r in rows])
    worst = float(np.abs(cells - np.array(BUDGET_TABLE)).max())
    counts = [analytic_pixel_count(RetinaConfig(n)) for n in (1, 2, 3)]
    elapsed = time.perf_counter() - start
    ok = code == 0 and cells.shape == (10, 3) and worst <= 0.1 + 1e-9 \
        and counts == [2304, 768, 590] and elapsed < 1.0
    record(1, ok, f"30 cells max dev {worst:.2f} pp, counts {counts}, {elapsed:.2f}s")


# -- 2: memory semantics -------------------------------------------------------

def test_criterion_2_memory_replay():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    n_seq, h, w, g = 10_000, 32, 64, 8
    depth = (2, 3, 4)
    lengths = rng.integers(1, 7, n_seq)
    mismatches = 0
    for length in np.unique(lengths):
        idx = np.flatnonzero(lengths == length)
        b = len(idx)
        tops = rng.integers(0, (h - g) // 4 + 1, (b, length)) * 4
        lefts = rng.integers(0, (w - g) // 4 + 1, (b, length)) * 4
        feats = [[rng.random((b, c, g // s, g // s)) for c, s in zip(depth, (1, 2, 4))]
                 for _ in range(length)]
        m = MemoryState.empty(b, h, w, *depth, dtype=torch.float64)
        for t in range(length):
            specs = [GlimpseSpec(int(tops[i, t]), int(lefts[i, t])) for i in range(b)]
            f = GlimpseFeatures(*(torch.from_numpy(x) for x in feats[t]))
            m = mem.write(m, f, specs)
        got = [x.numpy() for x in m.grids]
        occ = [o.numpy()[:, 0] for o in m.occupancy]
        for i in range(b):
            # cell-by-cell replay, newest write wins
            ref = [np.zeros((c, h // s, w // s)) for c, s in zip(depth, (1, 2, 4))]
            ref_occ = [np.zeros((h // s, w // s), bool) for s in (1, 2, 4)]
            for t in range(length):
                for lvl, s in enumerate((1, 2, 4)):
                    r0, c0, size = tops[i, t] // s, lefts[i, t] // s, g // s
                    for r in range(size):
                        for c in range(size):
                            ref[lvl][:, r0 + r, c0 + c] = feats[t][lvl][i, :, r, c]
                            ref_occ[lvl][r0 + r, c0 + c] = True
            if not all(np.array_equal(got[lvl][i], ref[lvl]) and
                       np.array_equal(occ[lvl][i], ref_occ[lvl]) for lvl in range(3)):
                mismatches += 1
    elapsed = time.perf_counter() - start
    record(2, mismatches == 0 and elapsed < 30,
           f"{n_seq} sequences, {mismatches} mismatches, {elapsed:.1f}s")


# -- 3: loss correctness -------------------------------------------------------

def _loss_loop(preds, target, cert):
    k, h, w = target.shape
    totals = []
    for pred in preds:
        s = 0.0
        for i in range(h):
            for j in range(w):
                e = 0.0
                for c in range(k):
                    p = min(max(pred[c, i, j], 1e-7), 1 - 1e-7)
                    y = target[c, i, j]
                    e -= y * math.log(p) + (1 - y) * math.log(1 - p)
                e /= k
                s += cert[i, j] * e + math.exp(-cert[i, j])
        totals.append(s / (h * w))
    return totals


def _finite_difference_check(n_params=20, eps=3e-5):
    torch.manual_seed(0)
    model = ActiveSegmentationNet(ModelConfig(num_classes=3, image_height=32, image_width=64))
    model = model.double()
    rng = np.random.default_rng(0)
    image = rng.random((1, 32, 64, 3))
    label = rng.integers(0, 3, (1, 32, 64))
    retina = RetinaConfig(3, 24)
    locations = [[(4, 8), (8, 36)]]

    # training truncates backprop at S_{t-1}; finite differences see the whole
    # function, so the comparison backpropagates through it as well
    def objective():
        res = run_rollouts(model, image, label, "glimpse_only", 2, None, retina,
                           [np.random.default_rng(0)], locations=locations, detach_prev=False)
        return res.objective.sum()

    model.zero_grad()
    objective().backward()
    params = list(model.parameters())
    sizes = np.array([p.numel() for p in params])
    flat = rng.choice(sizes.sum(), n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, nonzero = 0.0, 0
    with torch.no_grad():
        for f in flat:
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            p = params[pi].view(-1)
            j = int(f - offsets[pi])
            analytic = params[pi].grad.view(-1)[j].item()
            orig = p[j].item()
            p[j] = orig + eps
            up = objective().item()
            p[j] = orig - eps
            down = objective().item()
            p[j] = orig
            numeric = (up - down) / (2 * eps)
            scale = max(abs(numeric), abs(analytic))
            if scale > 0:
                nonzero += 1
                worst = max(worst, abs(numeric - analytic) / scale)
    return worst, nonzero


def test_criterion_3_loss_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_loop = 0.0
    for _ in range(50):
        preds = [rng.random((2, 4, 4)) for _ in range(3)]
        target = np.eye(2)[rng.integers(0, 2, (4, 4))].transpose(2, 0, 1)
        cert = rng.normal(0, 2, (4, 4))
        t = torch.from_numpy(target)[None]
        errors = ErrorMaps(*(bce_error_map(torch.from_numpy(p)[None], t) for p in preds))
        state = step_loss(LossState.zero(1, torch.float64), errors, torch.from_numpy(cert)[None, None])
        ref = _loss_loop(preds, target, cert)
        got = [s.item() for s in state.streams()]
        worst_loop = max(worst_loop, max(abs(a - b) for a, b in zip(got, ref)))
    worst_cstar = 0.0
    for e in (0.01, 0.1, 0.5, 1.0, 3.0):
        res = minimize_scalar(lambda c: c * e + math.exp(-c), bounds=(-30, 30), method="bounded",
                              options={"xatol": 1e-11})
        worst_cstar = max(worst_cstar, abs(res.x + math.log(e)))
    worst_grad, nonzero = _finite_difference_check()
    elapsed = time.perf_counter() - start
    ok = worst_loop <= 1e-9 and worst_cstar <= 1e-6 and worst_grad <= 1e-3 and elapsed < 120
    record(3, ok, f"loop dev {worst_loop:.1e}, C* dev {worst_cstar:.1e}, "
                  f"grad rel err {worst_grad:.1e} on 20 params ({nonzero} non-zero), {elapsed:.1f}s")


# -- 4: policy correctness -----------------------------------------------------

def _brute(c, allowed):
    best, best_idx = np.inf, None
    for r in range(c.shape[0] // 16):
        for col in range(c.shape[1] // 16):
            if allowed(r, col):
                s = c[16 * r:16 * r + 16, 16 * col:16 * col + 16].sum()
                if s < best:
                    best, best_idx = s, (r, col)
    return snap_location(16 * best_idx[0] + 8, 16 * best_idx[1] + 8, c.shape[0], c.shape[1], 48)


def test_criterion_4_policy_correctness():
    start = time.perf_counter()
    retina = RetinaConfig()
    rng = np.random.default_rng(0)
    wrong = 0
    for _ in range(1000):
        c = rng.normal(size=(128, 256))
        current = GlimpseSpec(*snap_location(int(rng.integers(128)), int(rng.integers(256)),
                                             128, 256, 48))
        cy, cx = current.center
        checks = [
            (select_uncertainty(c, retina), _brute(c, lambda r, col: True)),
            (select_horizon(c, retina), _brute(c, lambda r, col: 2 <= r <= 5)),
            (select_restricted(c, current, retina),
             _brute(c, lambda r, col: abs(16 * r + 8 - cy) <= 48 and abs(16 * col + 8 - cx) <= 48)),
        ]
        wrong += sum((s.top, s.left) != ref for s, ref in checks)
        shift = float(rng.normal(0, 100))
        wrong += select_uncertainty(c + shift, retina) != checks[0][0]
    lookup = {}
    for r in range(8):
        for col in range(16):
            key = snap_location(16 * r + 8, 16 * col + 8, 128, 256, 48)
            lookup[key] = lookup.get(key, 0) + 1
    draws = 100_000
    counts = dict.fromkeys(lookup, 0)
    for _ in range(draws):
        s = select_random(rng, 128, 256, retina)
        counts[(s.top, s.left)] += 1
    observed = np.array([counts[k] for k in lookup])
    expected = np.array([lookup[k] for k in lookup]) * draws / 128
    p = chisquare(observed, expected).pvalue
    elapsed = time.perf_counter() - start
    record(4, wrong == 0 and p > 0.01 and elapsed < 60,
           f"1000 maps x 3 policies, {wrong} disagreements, chi-square p={p:.3f}, {elapsed:.1f}s")


# -- 5: locality / globality ---------------------------------------------------

def test_criterion_5_local_vs_global():
    start = time.perf_counter()
    torch.manual_seed(0)
    model = ActiveSegmentationNet(ModelConfig(num_classes=5, image_height=64, image_width=128))
    model = model.double()
    gen = torch.Generator().manual_seed(0)
    m = model.empty_memory(1)
    m = MemoryState(*(torch.rand(x.shape, generator=gen, dtype=torch.float64) for x in m.grids),
                    occupancy=m.occupancy)
    radius = model.local.receptive_radius()
    rng = np.random.default_rng(0)
    leaks = misses = 0
    with torch.no_grad():
        base = model.decode_local(m)
        for _ in range(10):
            i, j = int(rng.integers(16)), int(rng.integers(32))
            bumped = m.bottleneck.clone()
            bumped[0, :, i, j] += torch.randn(32, generator=gen, dtype=torch.float64)
            out = model.decode_local(MemoryState(m.level1, m.level2, bumped, m.occupancy))
            diff = (out - base).abs().amax(dim=(0, 1)).numpy()
            inside = np.zeros_like(diff, dtype=bool)
            inside[max(4 * i - radius, 0):4 * i + 4 + radius,
                   max(4 * j - radius, 0):4 * j + 4 + radius] = True
            leaks += int((diff[~inside] != 0).sum())
            misses += int(diff[4 * i:4 * i + 4, 4 * j:4 * j + 4].max() == 0)
    jac = torch.autograd.functional.jacobian(model.global_.coarse, m.bottleneck)
    reach = jac.abs().sum(dim=(0, 4, 5)).flatten(0, 2).flatten(1)
    dead = int((reach == 0).sum())
    elapsed = time.perf_counter() - start
    record(5, leaks == 0 and misses == 0 and dead == 0 and elapsed < 60,
           f"radius {radius}px, {leaks} changes outside, {misses} blocks unchanged; "
           f"{tuple(reach.shape)} coarse-unit x cell pairs, {dead} zero, {elapsed:.1f}s")


# -- 6: learning signal --------------------------------------------------------

LEARN = dict(num_classes=5, image_height=64, image_width=128, glimpse_size=24, num_glimpses=5,
             num_samples=150, val_fraction=0.2, lr=3e-3, batch_size=8, seed=0)
GLIMPSE_EPOCHS = 20
HYBRID_EPOCHS = 35
EVAL_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def learned(tmp_path_factory):
    root = tmp_path_factory.mktemp("learn")
    start = time.perf_counter()
    runs = {}
    for agent, epochs in (("glimpse_only", GLIMPSE_EPOCHS), ("hybrid", HYBRID_EPOCHS)):
        config = TrainConfig(**LEARN, agent=agent, epochs=epochs, out_dir=str(root / agent))
        model, _ = train(config)
        runs[agent] = (config, model)
    elapsed = time.perf_counter() - start
    _, val = build_datasets(runs["glimpse_only"][0])
    curves = {}
    for agent, (config, model) in runs.items():
        for policy in ("uncertainty", "random"):
            per_seed = [validate(model, val, config, policy=policy, seed=s)["accuracy_curve"]
                        for s in EVAL_SEEDS]
            curves[agent, policy] = np.mean(per_seed, axis=0)
    return curves, elapsed


@pytest.mark.slow
def test_criterion_6a_uncertainty_beats_random(learned):
    curves, elapsed = learned
    u, r = curves["glimpse_only", "uncertainty"][-1], curves["glimpse_only", "random"][-1]
    record("6a", u - r >= 0.01 and elapsed <= 1800,
           f"T=5 accuracy uncertainty {u:.4f} vs random {r:.4f}, gap {100 * (u - r):.2f} pp, "
           f"training {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6b_hybrid_at_two_glimpses(learned):
    curves, _ = learned
    h, g = curves["hybrid", "uncertainty"][1], curves["glimpse_only", "uncertainty"][1]
    record("6b", h >= g, f"T=2 accuracy hybrid {h:.4f} vs glimpse-only {g:.4f}")


@pytest.mark.slow
def test_criterion_6c_more_glimpses_help(learned):
    curves, _ = learned
    c = curves["glimpse_only", "uncertainty"]
    record("6c", c[-1] > c[0], f"glimpse-only accuracy T=1 {c[0]:.4f} -> T=5 {c[-1]:.4f}")


# -- 7: determinism and persistence --------------------------------------------

def test_criterion_7_determinism(tmp_path):
    start = time.perf_counter()
    flags = ["--num-classes", "3", "--image-height", "32", "--image-width", "64",
             "--glimpse-size", "12", "--num-glimpses", "3", "--num-samples", "12",
             "--batch-size", "4", "--epochs", "2", "--seed", "11"]
    histories, traces = [], []
    for name in ("a", "b"):
        out = tmp_path / name
        with redirect_stdout(io.StringIO()):
            assert main(["train", *flags, "--out-dir", str(out)]) == 0
            for policy in ("uncertainty", "random"):
                trace = out / f"{policy}.jsonl"
                assert main(["rollout", "--checkpoint", str(out / "checkpoint.npz"),
                             "--synthetic-index", "3", "--policy", policy, "--seed", "5",
                             "--out", str(trace)]) == 0
                traces.append(trace.read_bytes())
        histories.append((out / "history.json").read_bytes())
    same_history = histories[0] == histories[1]
    same_traces = traces[:2] == traces[2:]
    config = TrainConfig(num_classes=3, image_height=32, image_width=64, glimpse_size=12,
                         num_glimpses=3, num_samples=12, batch_size=4, epochs=2, seed=11)
    model, _, _ = load_checkpoint(tmp_path / "a" / "checkpoint.npz")
    from_disk = evaluate(tmp_path / "a" / "checkpoint.npz", config)
    in_memory = evaluate(model, config)
    best = json.loads(histories[0])["best_val_accuracy"]
    round_trip = from_disk == in_memory and from_disk["final_accuracy"] == best
    elapsed = time.perf_counter() - start
    record(7, same_history and same_traces and round_trip and elapsed < 300,
           f"histories identical {same_history}, traces identical {same_traces}, "
           f"checkpoint evaluation bit-equal {round_trip}, {elapsed:.1f}s")


# -- 8: metric oracles ---------------------------------------------------------

def _oracle(pred, label, k):
    cm = [[0] * k for _ in range(k)]
    for p, t in zip(pred.ravel().tolist(), label.ravel().tolist()):
        cm[t][p] += 1
    total = sum(map(sum, cm))
    acc = sum(cm[c][c] for c in range(k)) / total
    ious = []
    for c in range(k):
        union = sum(cm[c]) + sum(cm[r][c] for r in range(k)) - cm[c][c]
        if union:
            ious.append(cm[c][c] / union)
    return acc, sum(ious) / len(ious)


def test_criterion_8_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        label = rng.integers(0, k, (8, 8))
        scores = rng.random((8, 8, k))
        acc_ref, miou_ref = _oracle(scores.argmax(-1), label, k)
        mismatches += pixel_accuracy(scores, label) != acc_ref
        mismatches += mean_iou(scores, label, k)[1] != miou_ref
    elapsed = time.perf_counter() - start
    record(8, mismatches == 0 and elapsed < 10,
           f"1000 instances, {mismatches} mismatches, {elapsed:.2f}s")
