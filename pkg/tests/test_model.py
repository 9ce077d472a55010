"""Model assembly: forward contract, parameter census, baseline matching."""

import numpy as np
import pytest

from fgmoe.config import ExperimentConfig
from fgmoe.model import (FGMoEModel, SharedMLPModel, build_model, count_params,
                         solve_mlp_hidden)
from fgmoe.moe import RoutingCollector


def _cfg(**kw):
    args = dict(base_channels=8, decoder_channels=8, attention_heads=2,
                shared_experts=1, routed_experts=2, top_k=1, expert_hidden=16,
                image_size=64, seed=11)
    args.update(kw)
    return ExperimentConfig(**args)


def _image(rng, size=64):
    return rng.uniform(size=(size, size, 3))


# ---- forward contract -----------------------------------------------------

def test_one_forward_serves_all_tasks(rng):
    model = FGMoEModel(_cfg())
    preds = model.forward(_image(rng))
    assert set(preds) == {"seg", "depth", "normal", "bound"}
    assert preds["seg"].shape == (64, 64, 6)
    assert preds["depth"].shape == (64, 64, 1)
    assert preds["normal"].shape == (64, 64, 3)
    assert preds["bound"].shape == (64, 64, 1)
    assert np.allclose(np.linalg.norm(preds["normal"].data, axis=-1), 1.0, atol=1e-12)
    for p in preds.values():
        assert np.all(np.isfinite(p.data))


def test_forward_is_deterministic(rng):
    img = _image(rng)
    a = FGMoEModel(_cfg()).forward(img)
    b = FGMoEModel(_cfg()).forward(img)
    for t in a:
        assert np.array_equal(a[t].data, b[t].data)


def test_precomputed_pyramid_matches_internal_encoding(rng):
    model = FGMoEModel(_cfg())
    img = _image(rng)
    direct = model.forward(img)
    via_pyramid = model.forward(img, pyramid=model.encoder.encode(img))
    for t in direct:
        assert np.array_equal(direct[t].data, via_pyramid[t].data)


def test_branch_init_does_not_depend_on_task_set(rng):
    full = FGMoEModel(_cfg())
    pair = FGMoEModel(_cfg(tasks=("seg", "depth")))
    assert np.array_equal(full.branches["seg"].mixer.w_p.data,
                          pair.branches["seg"].mixer.w_p.data)
    assert np.array_equal(full.branches["depth"].head.weight.data,
                          pair.branches["depth"].head.weight.data)


def test_collector_sees_global_and_task_layers(rng):
    model = FGMoEModel(_cfg())
    collector = RoutingCollector()
    model.forward(_image(rng), training=True, collector=collector)
    stats = collector.summary()
    assert set(stats) == {"global_moe", "task_moe.seg", "task_moe.depth",
                          "task_moe.normal", "task_moe.bound"}
    assert all(s["tokens"] == 16 * 16 for s in stats.values())


# ---- parameters -----------------------------------------------------------

def test_param_census_structure():
    model = FGMoEModel(_cfg())
    census = count_params(model)
    groups = set(census.breakdown)
    assert {"encoder", "aggregator", "global_moe"} <= groups
    for t in ("seg", "depth", "normal", "bound"):
        assert {f"mixer.{t}", f"task_moe.{t}", f"head.{t}"} <= groups
    assert census.total == sum(g["total"] for g in census.breakdown.values())
    assert census.trainable == sum(g["trainable"] for g in census.breakdown.values())
    assert census.total == sum(p.size for _, p in model.named_parameters())


def test_decoder_only_freezes_encoder():
    frozen = count_params(FGMoEModel(_cfg(mode="decoder-only")))
    assert frozen.breakdown["encoder"]["trainable"] == 0
    assert frozen.trainable == frozen.total - frozen.breakdown["encoder"]["total"]
    trained = count_params(FGMoEModel(_cfg(mode="full")))
    assert trained.breakdown["encoder"]["trainable"] \
        == trained.breakdown["encoder"]["total"]


def test_unique_parameter_names():
    model = FGMoEModel(_cfg())
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    buf_names = [n for n, _ in model.named_buffers()]
    assert len(buf_names) == 16  # mean and var for two BatchNorms per mixer, four tasks


def test_state_entries_cover_params_and_buffers():
    model = FGMoEModel(_cfg())
    entries = model.state_entries()
    n_params = len(model.named_parameters())
    assert len(entries) == n_params + len(model.named_buffers())
    assert all(not trainable for _, _, trainable in entries[n_params:])


# ---- baseline decoder -----------------------------------------------------

def test_mlp_baseline_matches_trainable_count():
    cfg = _cfg(decoder_channels=16, attention_heads=4, expert_hidden=64,
               shared_experts=2, routed_experts=4, top_k=2)
    fg = count_params(FGMoEModel(cfg)).trainable
    mlp = count_params(SharedMLPModel(cfg.replace(decoder="mlp"))).trainable
    assert abs(fg - mlp) / fg < 0.02


def test_mlp_forward_contract(rng):
    model = SharedMLPModel(_cfg(decoder="mlp"))
    preds = model.forward(_image(rng))
    assert set(preds) == {"seg", "depth", "normal", "bound"}
    assert preds["seg"].shape == (64, 64, 6)


def test_solve_mlp_hidden_inverts_param_formula():
    c = 8
    for h in (1, 5, 10, 37):
        target = h * h + h * (2 * c + 2) + c
        assert solve_mlp_hidden(target, c) == h
    assert solve_mlp_hidden(0, c) == 1
    # returned width is the best integer fit for an off-lattice target
    target = 500
    best = min(range(1, 200), key=lambda h: abs(h * h + h * (2 * c + 2) + c - target))
    assert solve_mlp_hidden(target, c) == best


def test_build_model_dispatch():
    assert isinstance(build_model(_cfg()), FGMoEModel)
    assert isinstance(build_model(_cfg(decoder="mlp")), SharedMLPModel)
