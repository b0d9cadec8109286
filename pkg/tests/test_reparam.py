from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_tree, same_structure_tree
from revtlab import nets as N
from revtlab import reparam as R
from revtlab import tensor as T
from revtlab.nets import MiniMiTConfig
from revtlab.params import ALL, DECODER, ENCODER, Checkpoint, Match, select
from revtlab.reparam import MergeError, MergeSpec
from revtlab.tensor import Tensor


def _triple(seed, n=6):
    rng = np.random.default_rng(seed)
    t0 = random_tree(rng, n)
    return [Checkpoint(t0, {})] + [Checkpoint(same_structure_tree(t0, rng), {}) for _ in range(2)]


def _model_ckpts(m=3, kind="mit", config=None):
    config = config or MiniMiTConfig(dims=(8, 16), depths=(1, 1), heads=(1, 2), sr_ratios=(2, 1),
                                     patch_kernels=(7, 3), patch_strides=(4, 2), decoder_dim=8)
    out = []
    for i in range(m):
        model = N.build_model(kind, config, 0, 10 + i)
        rng = np.random.default_rng(i)
        # emulate fine-tuning: small encoder perturbations around the shared start
        tree = model.params.replace({p: model.params.array(p) + 0.01 * rng.normal(size=model.params[p].shape)
                                     for p in select(model.params, ENCODER)})
        out.append(Checkpoint(tree, {"model": model.config_dict()}))
    return out


def _scalar_mean(trees, weights, path):
    arr = np.zeros(trees[0][path].shape)
    flat = arr.reshape(-1)
    for k in range(flat.size):
        flat[k] = sum(float(w) * float(t.array(path).reshape(-1)[k]) for w, t in zip(weights, trees))
    return arr


def test_spec_validation():
    cks = _triple(0)
    assert MergeSpec(cks).weights == (1 / 3, 1 / 3, 1 / 3)
    for bad in [dict(weights=(0.5, 0.5)), dict(weights=(0.5, 0.6, -0.1)), dict(weights=(0.3, 0.3, 0.3)),
                dict(donor=0), dict(donor=4)]:
        with pytest.raises(MergeError):
            MergeSpec(cks, **bad)
    with pytest.raises(MergeError):
        MergeSpec(())


def test_scalar_loop_oracle_full_selector():
    cks = _triple(1)
    out = R.average_params(MergeSpec(cks, selector=ALL))
    trees = [c.tree for c in cks]
    for p in out:
        assert np.max(np.abs(out.array(p) - _scalar_mean(trees, [1 / 3] * 3, p))) <= 1e-7


def test_unselected_paths_come_from_donor():
    cks = _triple(2, n=10)
    sel = Match(part="encoder")
    for donor in (1, 2, 3):
        out = R.average_params(MergeSpec(cks, selector=sel, donor=donor))
        chosen = set(select(out, sel))
        for p in out:
            if p not in chosen:
                np.testing.assert_array_equal(out.array(p), cks[donor - 1].tree.array(p))


def test_structure_mismatch_names_path():
    cks = _triple(3)
    bad = cks[2].tree.replace({})
    path = bad.paths()[0]
    entries = {p: (bad[p], bad.tags(p)) for p in bad}
    entries[path] = (Tensor(np.zeros(bad[path].shape + (2,), np.float32)), bad.tags(path))
    from revtlab.params import ParamTree
    with pytest.raises(MergeError, match=path.replace(".", r"\.")):
        R.average_params(MergeSpec((cks[0], cks[1], Checkpoint(ParamTree(entries), {}))))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3), st.permutations(range(3)))
def test_averaging_properties(seed, raw, perm):
    cks = _triple(seed)
    w = tuple(np.array(raw) / np.sum(raw))
    w = w[:2] + (1.0 - w[0] - w[1],)
    spec = MergeSpec(cks, weights=w, selector=ALL)
    out = R.average_params(spec)
    # convexity
    for p in out:
        stack = np.stack([c.tree.array(p) for c in cks])
        assert np.all(out.array(p) >= stack.min(0)) and np.all(out.array(p) <= stack.max(0))
    # permutation invariance, bit exact
    permuted = MergeSpec([cks[i] for i in perm], weights=[w[i] for i in perm], selector=ALL)
    assert R.average_params(permuted).same_bytes(out)
    # fixed point
    same = MergeSpec([cks[0]] * 3, weights=w, selector=ALL)
    assert R.average_params(same).same_bytes(cks[0].tree)
    # vertex weights
    for k in range(3):
        vw = tuple(1.0 if i == k else 0.0 for i in range(3))
        assert R.average_params(MergeSpec(cks, weights=vw, selector=ALL)).same_bytes(cks[k].tree)


def test_single_checkpoint_revt_is_identity():
    ck = _model_ckpts(1)[0]
    assert R.assemble_revt(MergeSpec([ck])).params.same_bytes(ck.tree)


def test_donor_changes_only_decoder():
    cks = _model_ckpts()
    a, b = R.assemble_revt(MergeSpec(cks, donor=1)), R.assemble_revt(MergeSpec(cks, donor=2))
    for p in a.params:
        same = np.array_equal(a.params.array(p), b.params.array(p))
        if a.params.tags(p).part == "encoder":
            assert same
        elif p.endswith(".weight") and a.params.tags(p).layer != "norm":
            assert not same


def test_revt_requires_encoder_selector():
    with pytest.raises(MergeError):
        R.assemble_revt(MergeSpec(_model_ckpts(), selector=ALL))


def test_linear_encoder_revt_equals_feature_mean():
    from revtlab.ensemble import encoder_feature_mean

    cks = _model_ckpts(config=MiniMiTConfig.linear(dim=8, decoder_dim=8))
    models = [R.model_of(c.tree, c.meta["model"]) for c in cks]
    x = np.random.default_rng(0).normal(size=(2, 3, 16, 16))
    for donor in (1, 3):
        revt = R.assemble_revt(MergeSpec(cks, donor=donor))
        with T.no_grad():
            feats = np.mean([N.forward_encoder(m, Tensor(x))[0].data for m in models], axis=0)
            via_decoder = N.forward_decoder(models[donor - 1], [Tensor(feats)], (16, 16)).data
        np.testing.assert_allclose(revt.predict(x), via_decoder, atol=1e-5)
        np.testing.assert_allclose(revt.predict(x), encoder_feature_mean(models, x, donor), atol=1e-5)


def test_part_modes_partition():
    cks = _model_ckpts()
    spec = MergeSpec(cks, donor=2)
    tree = cks[0].tree
    enc = set(select(tree, R.part_mode(spec, "encoder_only").selector))
    dec = set(select(tree, R.part_mode(spec, "decoder_only").selector))
    full = set(select(tree, R.part_mode(spec, "full").selector))
    assert enc.isdisjoint(dec) and enc | dec == full == set(tree.paths())
    assert R.average_params(R.part_mode(spec, "none")).same_bytes(cks[1].tree)
    ident = MergeSpec([cks[0]] * 3)
    assert R.average_params(R.part_mode(ident, "full")).same_bytes(cks[0].tree)
    with pytest.raises(ValueError):
        R.part_mode(spec, "half")


def test_block_modes():
    cks = _model_ckpts()
    spec = MergeSpec(cks)
    tree = cks[0].tree
    enc = set(select(tree, ENCODER))
    sel = {k: set(select(tree, R.block_mode(spec, k).selector)) for k in R.BLOCK_KINDS}
    assert sel["mixffn"] and sel["mixffn"] < enc
    rest = set(select(tree, ENCODER & (Match(layer="norm") | Match(layer="other"))))
    assert sel["conv_layers"] | sel["fc_layers"] | rest == enc
    assert not sel["conv_layers"] & sel["fc_layers"]
    for k in R.BLOCK_KINDS:
        ident = MergeSpec([cks[0]] * 3, selector=R.block_mode(spec, k).selector)
        assert R.average_params(ident).same_bytes(cks[0].tree)
    with pytest.raises(ValueError):
        R.block_mode(spec, "norms")


def test_merge_checkpoint_metadata():
    cks = _model_ckpts()
    out = R.merge_checkpoint(R.part_mode(MergeSpec(cks, names=("a", "b", "c")), "encoder_only"))
    assert out.meta["parents"] == ["a", "b", "c"]
    assert out.meta["selector"] == "part==encoder"
    assert out.meta["donor"] == 1 and out.meta["model"] == cks[0].meta["model"]
    again = Checkpoint.from_bytes(out.to_bytes())
    assert again.tree.same_bytes(out.tree) and again.meta["weights"] == out.meta["weights"]
    assert N.config_from_dict(again.meta["model"]) == N.config_from_dict(out.meta["model"])


def test_simplex_grid():
    assert sorted(R.simplex_grid(1.0)) == [(0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0)]
    assert len(R.simplex_grid(0.5)) == 6
    grid = R.simplex_grid(1 / 12)
    assert len(grid) == 91 and (4 / 12, 4 / 12, 4 / 12) in grid
    assert all(abs(sum(w) - 1) < 1e-12 for w in grid)
    with pytest.raises(ValueError):
        R.simplex_grid(0.3)


def test_sweep_vertices_match_single_models():
    cks = _model_ckpts()
    x = np.random.default_rng(1).normal(size=(1, 3, 16, 16))

    def score(model):
        return float(model.predict(x)[0, 0].mean())

    table = dict(R.sweep_weights(cks, 0.5, ENCODER, score))
    assert len(table) == 6
    for k in range(3):
        vw = tuple(1.0 if i == k else 0.0 for i in range(3))
        # vertex: encoder of model k with the donor (model 1) decoder
        expect = cks[0].tree.replace({p: cks[k].tree.array(p) for p in select(cks[0].tree, ENCODER)})
        assert table[vw] == score(R.model_of(expect, cks[0].meta["model"]))
    ranked = R.sweep_weights(cks, 0.5, ENCODER, score)
    assert [s for _, s in ranked] == sorted((s for _, s in ranked), reverse=True)
    with pytest.raises(MergeError):
        R.sweep_weights(cks[:2], 0.5, ENCODER, score)


def test_full_merge_of_identical_decoder_selector():
    cks = _model_ckpts()
    out = R.average_params(MergeSpec(cks, selector=DECODER, donor=3))
    for p in select(out, ENCODER):
        np.testing.assert_array_equal(out.array(p), cks[2].tree.array(p))
