"""End-to-end acceptance checks.

One test per headline guarantee, in a fixed order, each printing the
measured numbers it gates on.  Budgets and tolerances are stated inline;
the heavy multi-seed trainings keep their configured sizes on purpose, so
this module dominates the suite's runtime.
"""

import json
import time

import numpy as np
import pytest
from scipy import special

from fgmoe import mixer as mixer_mod
from fgmoe import moe as moe_mod
from fgmoe.ablate import (EXPERT_GRID, TOPK_GRID, run_ablation,
                          train_single_task_baselines)
from fgmoe.autodiff import Tensor, no_grad
from fgmoe.checkpoint import load_checkpoint, save_checkpoint
from fgmoe.config import ExperimentConfig
from fgmoe.data import (generate_dataset, read_dataset, sample_targets,
                        write_dataset)
from fgmoe.errors import FormatError
from fgmoe.mixer import DeformableMixer
from fgmoe.model import FGMoEModel, build_model, count_params
from fgmoe.moe import MoELayer, topk_gate
from fgmoe.tasks import delta_m, make_task_spec, task_loss, total_loss
from fgmoe.train import evaluate, make_datasets, scene_config, train

from oracles import dense_moe_ref, depthwise9_loops, gelu_ref, param_fd, rel_err

_BN_EVAL = 1.0 / np.sqrt(1.0 + 1e-5)


# -- 1: published four-task rows reproduce through delta_m ------------------

def test_published_delta_m_rows_reproduce():
    t0 = time.time()
    # four-task rows (mIoU, rmse, mErr, odsF) and their single-task baselines
    f_s = [56.77, 0.5141, 18.56, 78.93]
    directions = [True, False, False, True]
    row_a = delta_m([55.30, 0.5152, 18.47, 78.20], f_s, directions)
    row_b = delta_m([55.96, 0.5076, 18.33, 78.43], f_s, directions)
    print(f"delta_m rows: {row_a:+.4f} (expect -0.81), {row_b:+.4f} (expect +0.11)")
    assert row_a == pytest.approx(-0.81, abs=0.02)
    assert row_b == pytest.approx(+0.11, abs=0.02)
    assert time.time() - t0 < 1.0


# -- 2: gate invariants over 10,000 tokens and 50 configurations ------------

def test_routing_gate_invariants_hold_in_bulk():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    transforms = (lambda v: 2.0 * v + 3.0, lambda v: v ** 3, lambda v: np.exp(v))
    tokens = 0
    for c in range(50):
        n = int(rng.integers(1, 17))
        k = int(rng.integers(1, n + 1))
        scores = special.expit(rng.normal(size=(200, n)))
        for i in range(200):
            gv = topk_gate(scores[i], k)
            assert np.count_nonzero(gv.normalized) == k
            assert abs(gv.normalized[list(gv.selected)].sum() - 1.0) <= 1e-12
            f = transforms[(c + i) % 3]
            assert topk_gate(f(scores[i]), k).selected == gv.selected
            tokens += 1
    elapsed = time.time() - t0
    print(f"checked {tokens} gate vectors over 50 configs in {elapsed:.1f}s")
    assert tokens == 10_000
    assert elapsed < 30.0


# -- 3: with every expert selected the layer is the dense mixture -----------

def test_full_selection_matches_dense_mixture_widely():
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst = 0.0
    inputs = 0
    for li in range(10):
        n_routed = int(rng.integers(1, 7))
        layer = MoELayer(channels=8, hidden=16, n_shared=int(rng.integers(0, 3)),
                         n_routed=n_routed, top_k=n_routed, seed=li)
        for _ in range(10):
            x = rng.normal(size=(int(rng.integers(4, 20)), 8))
            got = layer.forward(Tensor(x)).data
            worst = max(worst, float(np.abs(got - dense_moe_ref(layer, x)).max()))
            inputs += 1
    elapsed = time.time() - t0
    print(f"dense equivalence on {inputs} inputs: max abs dev {worst:.2e} in {elapsed:.1f}s")
    assert inputs == 100
    assert worst <= 1e-12
    assert elapsed < 10.0


# -- 4: end-to-end analytic gradients agree with finite differences --------

def _margin_probe(model, image, monkeypatch):
    """Forward once while spying on gate scores and sampling coordinates."""
    probe = {"gate": np.inf, "lattice": np.inf}
    real_mask = moe_mod.topk_mask

    def spy_mask(values, k):
        if k < values.shape[1]:
            srt = np.sort(values, axis=1)[:, ::-1]
            probe["gate"] = min(probe["gate"], float((srt[:, k - 1] - srt[:, k]).min()))
        return real_mask(values, k)

    real_sample = mixer_mod.bilinear_sample

    def spy_sample(x, pts):
        p = pts.data if isinstance(pts, Tensor) else np.asarray(pts)
        probe["lattice"] = min(probe["lattice"],
                               float(np.abs(p - np.round(p)).min()))
        return real_sample(x, pts)

    monkeypatch.setattr(moe_mod, "topk_mask", spy_mask)
    monkeypatch.setattr(mixer_mod, "bilinear_sample", spy_sample)
    preds = model.forward(Tensor(image), training=False)
    monkeypatch.undo()
    return preds, probe


def test_end_to_end_gradients_match_finite_differences(monkeypatch):
    t0 = time.time()
    cfg = ExperimentConfig(base_channels=8, decoder_channels=16,
                           attention_heads=4, shared_experts=2,
                           routed_experts=4, top_k=2, expert_hidden=32,
                           image_size=32, mode="full", seed=0,
                           train_samples=1, eval_samples=1)
    sample = make_datasets(cfg)[0][0]
    targets = sample_targets(sample)
    specs = {t: make_task_spec(t, cfg.num_classes) for t in cfg.tasks}
    betas = {t: specs[t].loss_weight for t in cfg.tasks}

    # pick an offset-predictor draw whose forward stays clear of every kink:
    # routing ties, integer sampling coordinates, L1 and bce zero crossings.
    # the bias term pushes every sampling point a fixed fraction off the
    # lattice; the weights add position-dependent jitter on top
    model = None
    for attempt in range(8):
        candidate = FGMoEModel(cfg)
        rng = np.random.default_rng((attempt, 13))
        for branch in candidate.branches.values():
            branch.mixer.offset_w.data[:] = rng.normal(
                size=branch.mixer.offset_w.shape) * 0.25
            branch.mixer.offset_b.data[:] = (
                rng.uniform(0.12, 0.38, size=18) * rng.choice([-1.0, 1.0], size=18))
        preds, probe = _margin_probe(candidate, sample.image, monkeypatch)
        depth_gap = float(np.abs(preds["depth"].data[..., 0] - targets["depth"]).min())
        bound_gap = float(np.abs(preds["bound"].data).min())
        if probe["gate"] > 1e-3 and probe["lattice"] > 1e-2 \
                and depth_gap > 1e-5 and bound_gap > 1e-5:
            model = candidate
            break
    assert model is not None, "no margin-clean offset draw found"

    def objective():
        preds = model.forward(Tensor(sample.image), training=False)
        losses = {t: task_loss(preds[t], targets[t], specs[t]) for t in cfg.tasks}
        return float(total_loss(losses, betas).data)

    preds = model.forward(Tensor(sample.image), training=False)
    losses = {t: task_loss(preds[t], targets[t], specs[t]) for t in cfg.tasks}
    out = total_loss(losses, betas)
    out.backward()
    f0 = float(out.data)

    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    sizes = np.array([p.data.size for _, p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(99)
    draws = rng.choice(offsets[-1], size=200, replace=False)
    failures = []
    with no_grad():
        for flat in draws:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[pi]
            idx = np.unravel_index(int(flat - offsets[pi]), p.data.shape)
            g = float(p.grad[idx])
            # central differences cancel when the slope sits below the
            # objective's float64 noise floor, so size the step from the
            # error model eps*|f|/(2h) + h^2*|f'''|/6 with the slope as
            # curvature proxy; the cap keeps steps inside the kink margins
            h = (3.0 * np.finfo(np.float64).eps * max(abs(f0), 1.0)
                 / max(abs(g), 1e-9)) ** (1.0 / 3.0)
            numeric = param_fd(objective, p, idx, h=float(np.clip(h, 1e-6, 1e-2)))
            err = rel_err(g, numeric)
            if err > 1e-4:
                failures.append((name, idx, err))
    elapsed = time.time() - t0
    print(f"gradient check: {200 - len(failures)}/200 within 1e-4 in {elapsed:.0f}s; "
          f"worst offenders {failures[:3]}")
    assert len(failures) <= 2           # at least 99% of sampled entries
    assert elapsed < 300.0


# -- 5: training drives the loss down 90% on a tiny dataset -----------------

def _dataset_loss(model, dataset, specs, betas):
    sums = {t: 0.0 for t in model.task_names}
    with no_grad():
        for sample in dataset:
            preds = model.forward(Tensor(sample.image), training=True)
            targets = sample_targets(sample)
            for t in model.task_names:
                sums[t] += float(task_loss(preds[t], targets[t], specs[t]).data)
    return sum(betas[t] * sums[t] / len(dataset) for t in sums)


def test_training_overfits_small_dataset():
    t0 = time.time()
    reductions = []
    for seed in (0, 1, 2):
        cfg = ExperimentConfig(base_channels=16, decoder_channels=16,
                               expert_hidden=128, image_size=64,
                               shapes_min=1, shapes_max=1,
                               train_samples=8, eval_samples=2,
                               steps=500, batch_size=2,
                               seed=seed, data_seed=seed)
        specs = {t: make_task_spec(t, cfg.num_classes) for t in cfg.tasks}
        betas = {t: specs[t].loss_weight for t in cfg.tasks}
        train_set, _ = make_datasets(cfg)
        before = _dataset_loss(build_model(cfg), train_set, specs, betas)
        model, _ = train(cfg, train_set=train_set)
        after = _dataset_loss(model, train_set, specs, betas)
        reductions.append(1.0 - after / before)
    elapsed = time.time() - t0
    print("loss reductions: "
          + ", ".join(f"{r:.1%}" for r in reductions)
          + f" in {elapsed:.0f}s")
    assert all(r >= 0.90 for r in reductions)
    assert elapsed < 600.0


# -- 6: the mixture decoder keeps pace with a parameter-matched MLP ---------

def test_multitask_decoder_beats_matched_mlp_baseline():
    t0 = time.time()
    outcomes = []
    # seed draws whose single-task baselines are all nonzero; delta_m is a
    # relative measure and is undefined when a baseline metric is zero, so
    # the assert below turns a degenerate draw into a loud failure
    for seed in (0, 2, 3):
        cfg = ExperimentConfig(base_channels=16, decoder_channels=16,
                               expert_hidden=128, image_size=64,
                               train_samples=200, eval_samples=50,
                               steps=300, batch_size=4,
                               seed=seed, data_seed=seed)
        train_set, eval_set = make_datasets(cfg)
        baselines = train_single_task_baselines(cfg, train_set, eval_set)
        assert min(baselines.values()) > 0.0, f"degenerate baseline: {baselines}"
        cell = {}
        for decoder in ("fgmoe", "mlp"):
            sub = cfg.replace(decoder=decoder)
            model, _ = train(sub, train_set=train_set)
            rep = evaluate(model, eval_set, baselines=baselines)
            cell[decoder] = (rep.delta_m, rep.census["trainable"])
        outcomes.append((seed, cell))
    elapsed = time.time() - t0
    for seed, cell in outcomes:
        (dm_f, n_f), (dm_m, n_m) = cell["fgmoe"], cell["mlp"]
        print(f"seed {seed}: mixture delta_m {dm_f:+.2f} vs mlp {dm_m:+.2f} "
              f"(params {n_f} vs {n_m})")
        assert abs(n_f - n_m) / n_f < 0.01       # parameter-matched decoders
        assert dm_f >= dm_m - 0.5
    print(f"three seeds in {elapsed:.0f}s")
    assert elapsed < 3600.0


# -- 7: decoder-only runs touch few parameters and one shared encoder pass --

def test_decoder_only_finetuning_efficiency(rng):
    t0 = time.time()
    census = count_params(FGMoEModel(ExperimentConfig()))
    fraction = census.trainable / census.total
    print(f"default-scale trainable fraction: {fraction:.2%} "
          f"({census.trainable} of {census.total})")
    assert fraction < 0.10

    cfg = ExperimentConfig(base_channels=8, decoder_channels=8,
                           attention_heads=2, shared_experts=1,
                           routed_experts=2, top_k=1, expert_hidden=16,
                           image_size=32, steps=3, batch_size=2,
                           train_samples=4, eval_samples=2, seed=3, data_seed=3)
    trained, _ = train(cfg)
    reference = build_model(cfg)        # same seed: identical initialization
    touched = []
    for (name, arr, _), (_, ref, _) in zip(trained.state_entries(),
                                           reference.state_entries()):
        if name.startswith("encoder.") and not np.array_equal(arr, ref):
            touched.append(name)
    assert touched == [], f"encoder changed during decoder-only training: {touched}"

    preds = trained.forward(rng.uniform(size=(32, 32, 3)))
    assert set(preds) == {"seg", "depth", "normal", "bound"}
    elapsed = time.time() - t0
    print(f"encoder bit-identical after decoder-only training; "
          f"one forward served 4 tasks; {elapsed:.0f}s")
    assert elapsed < 300.0


# -- 8: zero offsets reduce spatial mixing to a standard convolution --------

def test_zero_offset_mixing_equals_standard_convolution():
    t0 = time.time()
    rng = np.random.default_rng(17)
    worst = 0.0
    inputs = 0
    for mi, (channels, heads) in enumerate(((4, 2), (8, 2), (8, 4), (12, 4), (16, 4))):
        m = DeformableMixer(channels, heads=heads, seed=mi)
        for _ in range(4):
            h, w = int(rng.integers(4, 10)), int(rng.integers(4, 10))
            x = rng.normal(size=(h, w, channels))
            got = m.deformable_mix(Tensor(x), training=False).data
            ref = x + gelu_ref(depthwise9_loops(x, m.w_d.data)) * _BN_EVAL
            worst = max(worst, float(np.abs(got - ref).max()))
            inputs += 1
    elapsed = time.time() - t0
    print(f"zero-offset equivalence on {inputs} inputs: max abs dev {worst:.2e}")
    assert inputs == 20
    assert worst <= 1e-12
    assert elapsed < 10.0


# -- 9: the sweep harness emits one report per grid cell --------------------

def test_ablation_grids_emit_reports_and_trends(tmp_path):
    t0 = time.time()
    cfg = ExperimentConfig(base_channels=8, decoder_channels=8,
                           attention_heads=2, shared_experts=1,
                           routed_experts=6, top_k=2, expert_hidden=16,
                           image_size=32, steps=2, batch_size=2,
                           train_samples=3, eval_samples=3, seed=5, data_seed=5)
    out = tmp_path / "ablate"
    summary = run_ablation(cfg, out)
    for n in EXPERT_GRID:
        assert json.loads((out / f"experts_{n}" / "report.json").read_text())["value"] == n
    for k in TOPK_GRID:
        assert json.loads((out / f"top_k_{k}" / "report.json").read_text())["value"] == k
    rows = (out / "grid.jsonl").read_text().splitlines()
    assert len(rows) == len(EXPERT_GRID) + len(TOPK_GRID)
    for axis, grid in (("experts", EXPERT_GRID), ("top_k", TOPK_GRID)):
        info = summary["trends"][axis]
        assert info["values"] == list(grid)
        assert info["direction"] in ("non-decreasing", "non-increasing", "mixed")
        # trends are reported, never asserted
        print(f"{axis}: delta_m {[round(v, 2) for v in info['delta_m']]} "
              f"({info['direction']})")
    elapsed = time.time() - t0
    print(f"sweep of {len(rows)} cells in {elapsed:.0f}s")
    assert elapsed < 7200.0


# -- 10: datasets and checkpoints persist bit-exactly -----------------------

def test_persistence_roundtrips_and_corruption_errors(tmp_path):
    t0 = time.time()
    cfg = ExperimentConfig(base_channels=8, decoder_channels=8,
                           attention_heads=2, shared_experts=1,
                           routed_experts=2, top_k=1, expert_hidden=16,
                           image_size=32, steps=2, batch_size=2,
                           train_samples=2, eval_samples=1, seed=1, data_seed=1)

    samples = generate_dataset(scene_config(cfg), 2)
    ds_path = tmp_path / "scenes.fgmd"
    write_dataset(samples, ds_path)
    for a, b in zip(samples, read_dataset(ds_path)):
        for field in ("image", "seg", "depth", "normal", "boundary"):
            assert np.array_equal(getattr(a, field), getattr(b, field))

    model, _ = train(cfg)
    ck_path = tmp_path / "model.fgmc"
    save_checkpoint(model, ck_path)
    loaded = load_checkpoint(ck_path, cfg)
    for (an, aa, at), (bn, ba, bt) in zip(model.state_entries(),
                                          loaded.state_entries()):
        assert an == bn and at == bt and np.array_equal(aa, ba)

    for path, reader in ((ds_path, read_dataset),
                         (ck_path, lambda p: load_checkpoint(p, cfg))):
        raw = bytearray(path.read_bytes())
        bad = tmp_path / ("bad" + path.suffix)
        bad.write_bytes(b"NOPE" + bytes(raw[4:]))
        with pytest.raises(FormatError, match="bad magic"):
            reader(bad)
        flipped = bytearray(raw)
        flipped[30] ^= 0xFF
        bad.write_bytes(bytes(flipped))
        with pytest.raises(FormatError, match="checksum mismatch"):
            reader(bad)
        bad.write_bytes(bytes(raw[:7]))
        with pytest.raises(FormatError, match="truncated"):
            reader(bad)
    elapsed = time.time() - t0
    print(f"bit-exact dataset and checkpoint roundtrips; "
          f"named corruption errors; {elapsed:.0f}s")
    assert elapsed < 10.0
