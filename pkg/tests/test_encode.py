import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokendrop.encode import (EncodeConfig, build_key_set, encode_stage, key_set_from_scores, local_spatial_merge,
                              merge_decision, merge_threshold, merge_window, partition_windows, window_similarity)
from tokendrop.errors import ConfigError, UndefinedSimilarityError
from tokendrop.fixtures import FixtureSpec, generate_fixture
from tokendrop.model import encode_patches, encoder_layer_forward
from tokendrop.numeric import SeededSource, cosine_sim
from tokendrop.pipeline import calibrate_tau_mean
from tokendrop.tokens import TokenGrid, VisionToken


def grid_of(rows, cols, dim=3):
    toks = [VisionToken(r * cols + c + 1, np.ones(dim), (float(r), float(c)), 1, frozenset({r * cols + c + 1}))
            for r in range(rows) for c in range(cols)]
    return TokenGrid(toks, rows, cols, np.zeros(dim))


def test_partition_8x8():
    w = partition_windows(grid_of(8, 8), 2)
    assert len(w) == 16 and all(len(x) == 4 for x in w)
    assert w[0] == [0, 1, 8, 9] and w[1] == [2, 3, 10, 11]


def test_partition_llava_scale():
    assert len(partition_windows(grid_of(24, 24, 1), 2)) == 144


def test_partition_ragged():
    w = partition_windows(grid_of(5, 5), 2)
    assert sorted(len(x) for x in w) == [1, 2, 2, 2, 2, 4, 4, 4, 4]
    assert sorted(itertools.chain(*w)) == list(range(25))


def test_partition_errors():
    with pytest.raises(ConfigError):
        partition_windows(grid_of(3, 3), 4)
    with pytest.raises(ConfigError):
        partition_windows(grid_of(3, 3), 1)


def test_window_similarity_examples():
    v = np.array([1.0, 2.0, -1.0])
    assert window_similarity([v] * 4) == pytest.approx(12.0)
    assert window_similarity([v, -v]) == pytest.approx(-2.0)
    with pytest.raises(UndefinedSimilarityError):
        window_similarity([v, np.zeros(3)])


def test_window_similarity_vs_pair_loop():
    e = SeededSource(8).matrix(4, 6)
    ref = sum(cosine_sim(e[m], e[n]) for m in range(4) for n in range(4) if m != n)
    assert abs(window_similarity(e) - ref) <= 1e-12


def test_merge_decision_examples():
    assert merge_decision(12.0, 4, 0.8)
    assert not merge_decision(0.0, 4, 0.8)
    assert not merge_decision(merge_threshold(4, 0.8), 4, 0.8)


def tok(i, emb, pos=(0.0, 0.0), mass=1, prov=None):
    return VisionToken(i, np.asarray(emb, dtype=float), pos, mass, prov or frozenset({i}))


def test_merge_window_identical():
    e = np.array([0.1, -3.0, 2.5])
    m = merge_window([tok(i, e) for i in (4, 2, 7)], [0.2, 0.5, 0.1])
    assert np.array_equal(m.embedding, e) and m.id == 2


def test_merge_window_weights():
    m = merge_window([tok(1, [1.0, 0.0]), tok(2, [0.0, 1.0])], [0.3, 0.1])
    assert np.allclose(m.embedding, [0.75, 0.25], atol=1e-15)


def test_merge_window_mass_fallback():
    m = merge_window([tok(1, [1.0], mass=3, prov=frozenset({1, 5, 6})), tok(2, [0.0])], [0.0, 0.0])
    assert m.embedding[0] == pytest.approx(0.75)


def test_merge_window_vs_convex_recomputation():
    src = SeededSource(12)
    embs = src.matrix(4, 5)
    masses = [1, 2, 1, 3]
    cls = src.unit(4)
    toks = [tok(i + 1, embs[i], (float(i), float(2 * i)), masses[i],
                frozenset(range(10 * i, 10 * i + masses[i]))) for i in range(4)]
    m = merge_window(toks, cls)
    raw = [masses[i] * cls[i] for i in range(4)]
    want = sum(raw[i] / sum(raw) * embs[i] for i in range(4))
    assert np.abs(m.embedding - want).max() <= 1e-12
    assert m.mass == 7 and len(m.provenance) == 7
    assert m.position == pytest.approx((sum(masses[i] * i for i in range(4)) / 7,
                                        sum(masses[i] * 2 * i for i in range(4)) / 7))


def test_constant_image_merges_every_window(weights, toy):
    patches = np.tile(SeededSource(1).uniform(toy.patch_dim), (64, 1))
    merged, events = local_spatial_merge(encode_patches(patches, weights), weights, EncodeConfig())
    assert len(merged.tokens) == 16 and len(events) == 16


def brute_force_survivors(grid, k, tau_mean):
    side = grid.grid_rows
    survivors = 0
    for r0 in range(0, side, k):
        for c0 in range(0, side, k):
            members = [grid.tokens[r * side + c].embedding for r in range(r0, min(r0 + k, side))
                       for c in range(c0, min(c0 + k, side))]
            n = len(members)
            s = sum(cosine_sim(a, b) for i, a in enumerate(members) for j, b in enumerate(members) if i != j)
            survivors += 1 if n > 1 and s > tau_mean * n * (n - 1) else n
    return survivors


@pytest.mark.parametrize("kind", ["noise", "blocks"])
def test_merge_count_matches_brute_force(weights, toy, kind):
    for seed in range(10):
        fx = generate_fixture(FixtureSpec(kind=kind), seed, toy)
        grid = encode_patches(fx.patches, weights)
        merged, _ = local_spatial_merge(grid, weights, EncodeConfig())
        assert len(merged.tokens) == brute_force_survivors(grid, 2, 0.8)


def test_noise_rarely_merges(weights, toy):
    counts = [len(encode_stage(generate_fixture(FixtureSpec(kind="noise"), s, toy).patches, weights,
                               EncodeConfig(), key_set=False).merged.tokens) for s in range(10)]
    assert np.mean(counts) >= 60


def test_mass_and_convexity(weights, toy):
    for seed in range(20):
        fx = generate_fixture(FixtureSpec(kind="blocks"), seed, toy)
        grid = encode_patches(fx.patches, weights)
        merged, events = local_spatial_merge(grid, weights, EncodeConfig())
        assert sum(t.mass for t in merged.tokens) == 64
        layer0, _ = encoder_layer_forward(grid.stacked(), weights, 0)
        for ev in events:
            members = layer0[list(ev.member_ids)]
            emb = merged.by_id()[ev.result_id].embedding
            assert (emb >= members.min(axis=0) - 1e-12).all() and (emb <= members.max(axis=0) + 1e-12).all()
        for t in merged.tokens:
            assert len(t.provenance) == t.mass


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9), st.floats(0.0, 0.09))
def test_raising_tau_never_adds_merges(weights, toy, seed, tau, delta):
    grid = encode_patches(generate_fixture(FixtureSpec(kind="blocks"), seed, toy).patches, weights)
    lo = local_spatial_merge(grid, weights, EncodeConfig(tau_mean=tau))[1]
    hi = local_spatial_merge(grid, weights, EncodeConfig(tau_mean=tau + delta))[1]
    assert len(hi) <= len(lo)


def test_key_set_uniform_scores_empty():
    ks = key_set_from_scores(range(1, 9), [0.125] * 8)
    assert len(ks) == 0 and ks.threshold_used == pytest.approx(0.125)


def test_key_set_single_outlier():
    scores = [0.9] + [0.001] * 7
    # 8 values, linear-interpolation quartiles: Q1 = Q3 = 0.001, so the fence is 0.001.
    ks = key_set_from_scores(range(1, 9), scores)
    assert ks.member_ids == {1}
    assert ks.threshold_used == pytest.approx(0.001)
    assert all(ks.scores[i] > ks.threshold_used for i in ks.member_ids)


def test_key_set_small_fallback():
    ks = key_set_from_scores([1, 2, 3], [0.1, 0.1, 0.8], iqr_factor=0.5)
    s = np.array([0.1, 0.1, 0.8])
    assert ks.threshold_used == pytest.approx(s.mean() + 0.5 * s.std())
    assert ks.member_ids == {3}


def test_build_key_set_uses_penultimate_layer(weights, toy):
    fx = generate_fixture(FixtureSpec(kind="blocks"), 3, toy)
    grid, _ = local_spatial_merge(encode_patches(fx.patches, weights), weights, EncodeConfig())
    ks = build_key_set(grid, weights, EncodeConfig())
    x = grid.stacked()
    for layer in range(1, 3):
        x, attn = encoder_layer_forward(x, weights, layer)
    assert np.allclose([ks.scores[i] for i in grid.ids], attn[0, 1:], atol=1e-15)
    assert EncodeConfig().resolved_key_layer(4) == 2


def test_encode_config_validation():
    with pytest.raises(ConfigError):
        EncodeConfig(window_k=1)
    with pytest.raises(ConfigError):
        EncodeConfig(tau_mean=1.0)
    with pytest.raises(ConfigError):
        EncodeConfig(key_layer=4).resolved_key_layer(4)


def test_tau_calibration_hits_stage_one_ratio(weights, blocks_fixtures):
    target = 64 * 440 / 576
    tau, achieved = calibrate_tau_mean(blocks_fixtures, weights, EncodeConfig(), target)
    assert abs(achieved - target) <= 0.05 * target
    assert 0 < tau < 1
