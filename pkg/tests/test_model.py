import copy
import math

import numpy as np
import pytest

from fashionke import numcore as nc
from fashionke.dataio import PostRecord, RegionRecord
from fashionke.errors import IncompatibleCheckpoint, InvalidLabel, InvalidShape, InvalidToken
from fashionke.model import (Checkpoint, ForwardOutput, ModelConfig, attribute_contextualize, clean_loss,
                             collate, encode_region_context, encode_text, forward, forward_batch,
                             init_params, load_checkpoint, normalize_mode, occasion_representation,
                             parameter_shapes, save_checkpoint, _encode_text_batch)
from fashionke.numcore import Tensor
from fashionke.ontology import load_ontology

import oracles


def _triple(params, prefix):
    return tuple(params[f"{prefix}.{k}"].values for k in ("wx", "wh", "b"))


def _post(cfg, space, n_regions, rng, tokens=(1, 2, 3), occasion=0):
    K = space.n_attribute_types
    regs = []
    for i in range(n_regions):
        attrs = [int(rng.integers(m)) for m in space.attribute_sizes]
        regs.append(RegionRecord((0.1 * i, 0.0, 0.1, 0.1), rng.normal(size=cfg.d),
                                 int(rng.integers(space.n_categories)), attrs))
    assert all(len(r.attributes) == K for r in regs)
    return PostRecord("p", rng.normal(size=cfg.d), list(tokens), regs, occasion)


def _closed_form_count(cfg, space):
    d, E, V, C = cfg.d, cfg.d_emb, cfg.vocab_size, cfg.n_maps
    K = space.n_attribute_types
    lstm = 2 * (d * 4 * d + d * 4 * d + 4 * d)
    aff = lambda i, o: i * o + o
    total = V * E + sum(w * E * C + C for w in cfg.kernel_widths) + aff(cfg.d_t, d)
    total += 2 * lstm + aff(d, 2 * d) + aff(2 * d, d) + aff(4 * d, d)
    total += 2 * K * aff(2 * d, d) + aff(2 * d, d)
    total += aff(d, space.n_occasions) + aff(d, space.n_categories)
    total += sum(aff(d, m) for m in space.attribute_sizes)
    return total


# -- parameters -----------------------------------------------------------------------------

@pytest.mark.parametrize("d,E,V,C", [(8, 4, 20, 3), (16, 5, 7, 2), (3, 2, 1, 1)])
def test_parameter_count_matches_closed_form(tiny_space, default_space, d, E, V, C):
    for space in (tiny_space, default_space):
        cfg = ModelConfig(d=d, d_emb=E, vocab_size=V, n_maps=C)
        assert init_params(cfg, space, 0).count() == _closed_form_count(cfg, space)


def test_default_text_width():
    assert ModelConfig().d_t == 128


def test_init_is_seeded(small_cfg, tiny_space):
    a, b = init_params(small_cfg, tiny_space, 3), init_params(small_cfg, tiny_space, 3)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    c = init_params(small_cfg, tiny_space, 4)
    assert not np.array_equal(a["lstm1.fwd.wx"].values, c["lstm1.fwd.wx"].values)


def test_mode_names():
    assert normalize_mode("Bi-LSTM1") == "bilstm1" and normalize_mode("FINAL") == "final"
    with pytest.raises(ValueError):
        normalize_mode("trilstm")


# -- text ------------------------------------------------------------------------------------

def _textcnn_oracle(tokens, params):
    cfg = params.cfg
    emb = params["embedding"].values
    parts = []
    for w in cfg.kernel_widths:
        W, b = params[f"conv{w}.w"].values, params[f"conv{w}.b"].values
        if not tokens:
            parts.append(np.zeros(cfg.n_maps))
            continue
        padded = [np.zeros(cfg.d_emb)] * (w - 1) + [emb[t] for t in tokens] + [np.zeros(cfg.d_emb)] * (w - 1)
        acts = []
        for s in range(len(padded) - w + 1):
            window = np.concatenate(padded[s:s + w])
            acts.append(np.maximum(window @ W + b, 0.0))
        parts.append(np.max(acts, axis=0))
    return np.concatenate(parts)


def test_text_vector_matches_direct_convolution(small_params):
    rng = np.random.default_rng(0)
    for n in (1, 2, 3, 7):
        tokens = [int(t) for t in rng.integers(0, 20, size=n)]
        out = encode_text(tokens, small_params).values
        assert out.shape == (small_params.cfg.d_t,)
        assert np.allclose(out, _textcnn_oracle(tokens, small_params), atol=1e-12)


def test_empty_tokens_encode_to_zero(small_params):
    assert np.array_equal(encode_text([], small_params).values, np.zeros(small_params.cfg.d_t))


def test_single_token_padding_invariance(small_params):
    alone = encode_text([5], small_params).values
    tokens = np.array([[5, 0, 0, 0, 0], [1, 2, 3, 4, 6]])
    batched = _encode_text_batch(small_params, tokens, np.array([1, 5])).values
    assert np.allclose(batched[0], alone, atol=1e-12)


def test_token_outside_vocabulary(small_params, small_cfg, tiny_space):
    with pytest.raises(InvalidToken):
        encode_text([20], small_params)
    with pytest.raises(InvalidToken):
        collate([_post(small_cfg, tiny_space, 1, np.random.default_rng(0), tokens=(-1,))],
                small_cfg, tiny_space)


# -- region context -------------------------------------------------------------------------

def test_zero_regions(small_params):
    H, h_o, C = encode_region_context(np.zeros((0, 8)), small_params)
    assert H.shape == (0, 16) and C.shape == (0, 8)
    assert np.array_equal(h_o.values, np.zeros(16))


def test_region_context_matches_two_pass_oracle(small_params):
    rng = np.random.default_rng(1)
    for m in (1, 2, 4):
        x = rng.normal(size=(m, 8))
        H, h_o, C = encode_region_context(x, small_params)
        hid, fin = oracles.bilstm(list(x), _triple(small_params, "lstm1.fwd"), _triple(small_params, "lstm1.bwd"))
        assert np.allclose(H.values, np.array(hid), atol=1e-12)
        assert np.allclose(h_o.values, fin, atol=1e-12)
        W, b = small_params.affine("category_rep")
        assert np.allclose(C.values, np.array(hid) @ W.values + b.values, atol=1e-12)


# -- occasion ---------------------------------------------------------------------------------

def test_occasion_representation_zero_inputs(small_cfg, tiny_space):
    params = init_params(small_cfg, tiny_space, 0)  # biases start at zero
    o = occasion_representation(np.zeros(8), np.zeros(small_cfg.d_t), np.zeros(16), params)
    assert np.array_equal(o.values, np.zeros(8))


def test_occasion_representation_matches_direct_affine(small_params):
    rng = np.random.default_rng(2)
    v, t, h = rng.normal(size=8), rng.normal(size=small_params.cfg.d_t), rng.normal(size=16)
    Wt, bt = (x.values for x in small_params.affine("text_proj"))
    Ww, bw = (x.values for x in small_params.affine("occasion_rep"))
    expect = np.concatenate([v, t @ Wt + bt, h]) @ Ww + bw
    assert np.allclose(occasion_representation(v, t, h, small_params).values, expect, atol=1e-12)
    no_text = np.concatenate([v, np.zeros(8), h]) @ Ww + bw
    assert np.allclose(occasion_representation(v, t, h, small_params, use_text=False).values, no_text, atol=1e-12)


def test_occasion_representation_shape_errors(small_params):
    with pytest.raises(InvalidShape):
        occasion_representation(np.zeros(7), np.zeros(12), np.zeros(16), small_params)
    with pytest.raises(InvalidShape):
        occasion_representation(np.zeros(8), np.zeros(11), np.zeros(16), small_params)


# -- attribute contextualization ----------------------------------------------------------------

def test_attribute_contextualize_matches_oracle(small_params):
    rng = np.random.default_rng(3)
    K = small_params.space.n_attribute_types
    h, c = rng.normal(size=16), rng.normal(size=8)
    a_list, c_ctx = attribute_contextualize(h, c, small_params)
    seq = [h @ small_params[f"attr_branch{k}.w"].values + small_params[f"attr_branch{k}.b"].values
           for k in range(K)] + [c]
    hid, _ = oracles.bilstm(seq, _triple(small_params, "lstm2.fwd"), _triple(small_params, "lstm2.bwd"))
    for k in range(K):
        W, b = (x.values for x in small_params.affine(f"attr_proj{k}"))
        assert np.allclose(a_list[k].values, hid[k] @ W + b, atol=1e-12)
    W, b = (x.values for x in small_params.affine("category_ctx"))
    assert np.allclose(c_ctx.values, hid[K] @ W + b, atol=1e-12)


def test_attribute_contextualize_single_type_reduces_to_length_two(small_cfg, tiny_space):
    doc = tiny_space.to_dict()
    doc["attribute_types"] = doc["attribute_types"][:1]
    space1 = load_ontology(doc)
    params = init_params(small_cfg, space1, 7)
    rng = np.random.default_rng(4)
    h, c = rng.normal(size=16), rng.normal(size=8)
    a_list, c_ctx = attribute_contextualize(h, c, params)
    f = nc.affine(Tensor(h), *params.affine("attr_branch0")).values
    hid, _ = nc.bilstm_encode(np.stack([f, c]), params.lstm("lstm2"))
    assert len(a_list) == 1
    assert np.allclose(c_ctx.values, hid.values[1] @ params["category_ctx.w"].values
                       + params["category_ctx.b"].values, atol=1e-12)


def test_attribute_contextualize_pass_through(small_params):
    rng = np.random.default_rng(5)
    h, c = rng.normal(size=16), rng.normal(size=8)
    a_list, c_ctx = attribute_contextualize(h, c, small_params, use_lstm=False)
    assert np.array_equal(c_ctx.values, c)
    W, b = (x.values for x in small_params.affine("attr_branch0"))
    assert np.allclose(a_list[0].values, h @ W + b, atol=1e-12)


# -- forward ----------------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["base", "bilstm1", "bilstm2", "final"])
def test_forward_shapes_and_normalization(small_params, small_cfg, tiny_space, mode):
    post = _post(small_cfg, tiny_space, 2, np.random.default_rng(6))
    out = forward(post, small_params, mode)
    assert out.occasion_probs.shape == (tiny_space.n_occasions,)
    assert len(out.category_probs) == 2 and len(out.attribute_probs) == 2
    assert all(len(a) == tiny_space.n_attribute_types for a in out.attribute_probs)
    vecs = [out.occasion_probs] + out.category_probs + [v for a in out.attribute_probs for v in a]
    assert all(abs(v.sum() - 1.0) < 1e-9 and v.min() >= 0 for v in vecs)


def _reversed(post):
    p = copy.deepcopy(post)
    p.regions = p.regions[::-1]
    return p


def test_region_order_matters_only_with_region_lstm(small_params, small_cfg, tiny_space):
    post = _post(small_cfg, tiny_space, 3, np.random.default_rng(7))
    for mode in ("base", "bilstm2"):
        a, b = forward(post, small_params, mode), forward(_reversed(post), small_params, mode)
        assert np.allclose(a.occasion_probs, b.occasion_probs, atol=1e-12)
        assert np.allclose(a.category.values, b.category.values[::-1], atol=1e-12)
    for mode in ("bilstm1", "final"):
        a, b = forward(post, small_params, mode), forward(_reversed(post), small_params, mode)
        assert not np.allclose(a.occasion_probs, b.occasion_probs, atol=1e-9)
        assert not np.allclose(a.category.values, b.category.values[::-1], atol=1e-9)


def test_zero_region_post(small_params, small_cfg, tiny_space):
    post = _post(small_cfg, tiny_space, 0, np.random.default_rng(8))
    out = forward(post, small_params)
    assert out.category.shape[0] == 0 and all(a.shape[0] == 0 for a in out.attributes)
    assert abs(out.occasion_probs.sum() - 1.0) < 1e-9
    loss = clean_loss(out, post).values
    assert np.isclose(loss, -math.log(out.occasion_probs[post.occasion] + 1e-12), atol=1e-12)


def test_text_switch_only_moves_occasion(small_params, small_cfg, tiny_space):
    post = _post(small_cfg, tiny_space, 3, np.random.default_rng(9))
    for mode in ("base", "final"):
        a = forward(post, small_params, mode, use_text=True)
        b = forward(post, small_params, mode, use_text=False)
        assert np.array_equal(a.category.values, b.category.values)
        for x, y in zip(a.attributes, b.attributes):
            assert np.array_equal(x.values, y.values)
        assert not np.allclose(a.occasion_probs, b.occasion_probs)


def test_batched_forward_matches_single_posts(small_params, small_data):
    records = small_data[0][:7]
    batch = forward_batch(small_params, collate(records, small_params.cfg, small_params.space))
    for b, rec in enumerate(records):
        single = forward(rec, small_params).for_post(0)
        mine = batch.for_post(b)
        assert np.allclose(mine["occasion"], single["occasion"], atol=1e-12)
        assert np.allclose(mine["category"], single["category"], atol=1e-12)


def test_collate_rejects_bad_shapes(small_cfg, tiny_space):
    post = _post(small_cfg, tiny_space, 1, np.random.default_rng(0))
    post.regions[0].feature = np.zeros(5)
    with pytest.raises(InvalidShape):
        collate([post], small_cfg, tiny_space)


# -- loss -------------------------------------------------------------------------------------

def _onehot_output(post, space, p_occ, p_cat, p_attrs):
    n = len(post.regions)
    return ForwardOutput(Tensor(np.array([p_occ])), Tensor(np.array(p_cat).reshape(n, -1)),
                         [Tensor(np.array([p[k] for p in p_attrs]).reshape(n, -1))
                          for k in range(space.n_attribute_types)],
                         np.zeros(n, dtype=np.int64), space)


def test_uniform_predictions_give_analytic_loss(default_space):
    space = default_space
    cfg = ModelConfig(d=4)
    post = _post(cfg, space, 1, np.random.default_rng(0))
    out = _onehot_output(post, space, np.full(space.n_occasions, 1 / space.n_occasions),
                         [np.full(space.n_categories, 1 / space.n_categories)],
                         [[np.full(m, 1 / m) for m in space.attribute_sizes]])
    K = space.n_attribute_types
    expect = math.log(space.n_occasions) + math.log(space.n_categories) + \
        sum(math.log(m) for m in space.attribute_sizes) / K
    assert abs(clean_loss(out, post).values - expect) < 1e-9


def test_perfect_predictions_give_zero_loss(tiny_space):
    cfg = ModelConfig(d=4)
    post = _post(cfg, tiny_space, 2, np.random.default_rng(1), occasion=2)
    eye = lambda n, i: np.eye(n)[i]
    out = _onehot_output(post, tiny_space, eye(tiny_space.n_occasions, 2),
                         [eye(tiny_space.n_categories, r.category) for r in post.regions],
                         [[eye(m, r.attributes[k]) for k, m in enumerate(tiny_space.attribute_sizes)]
                          for r in post.regions])
    assert abs(clean_loss(out, post).values) < 1e-9


def test_clean_loss_matches_hand_summed_terms(small_params, small_cfg, tiny_space):
    post = _post(small_cfg, tiny_space, 2, np.random.default_rng(10), occasion=1)
    out = forward(post, small_params)
    K = tiny_space.n_attribute_types
    ce = lambda p, y: -math.log(p[y] + 1e-12)
    expect = ce(out.occasion_probs, 1)
    expect += math.fsum(ce(out.category_probs[i], r.category) for i, r in enumerate(post.regions)) / 2
    expect += math.fsum(ce(out.attribute_probs[i][k], r.attributes[k])
                        for i, r in enumerate(post.regions) for k in range(K)) / (2 * K)
    assert abs(clean_loss(out, post).values - expect) < 1e-12


def test_label_out_of_range(small_params, small_cfg, tiny_space):
    post = _post(small_cfg, tiny_space, 1, np.random.default_rng(11))
    post.regions[0].category = tiny_space.n_categories
    out = forward(_post(small_cfg, tiny_space, 1, np.random.default_rng(11)), small_params)
    with pytest.raises(InvalidLabel):
        clean_loss(out, post)


def test_full_model_gradient_check(small_params, small_cfg, tiny_space):
    post = _post(small_cfg, tiny_space, 2, np.random.default_rng(12), tokens=(3, 9, 4, 1))
    report = nc.finite_difference_check(lambda: clean_loss(forward(post, small_params), post),
                                        list(small_params), eps=1e-4, tol=1e-4, max_coords=6)
    assert report.passed, report


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_round_trip(small_params, tmp_path):
    noise = {"category": np.arange(16.0).reshape(4, 4)}
    path = tmp_path / "ck.npz"
    save_checkpoint(Checkpoint(small_params, noise, {"mode": "final", "epoch": 3}), path)
    back = load_checkpoint(path)
    assert back.meta == {"mode": "final", "epoch": 3}
    assert back.fingerprint == small_params.space.fingerprint
    for name, t in small_params.named():
        assert np.array_equal(back.params[name].values, t.values)
    assert np.array_equal(back.noise_logits["category"], noise["category"])
    assert [n for n, _ in parameter_shapes(back.params.cfg, back.space)] == list(small_params.tensors)


def test_checkpoint_space_mismatch(small_params, default_space, tmp_path):
    path = tmp_path / "ck.npz"
    save_checkpoint(Checkpoint(small_params, {}, {}), path)
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(path).check_space(default_space)
