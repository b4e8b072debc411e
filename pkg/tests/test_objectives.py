import math
import warnings

import numpy as np
import pytest

from conftest import TOY_STUDENT, TOY_TEACHER, random_orthogonal, rotate_student
from distilbench import objectives as O
from distilbench.mapping import LayerMapping, build_mapping
from distilbench.objectives import (DistillSpec, ProjectionBank, SpecError, concat_resplit,
                                    cosine_hs_loss, default_relation_heads, direct_minilm_loss,
                                    gram_mse_loss, hs_loss, minilmv2_loss, od_loss,
                                    orthogonalize, parse_teacher_layer, relation_matrix,
                                    resplit_heads)
from distilbench.tensor import Tensor
from distilbench.transformer import ForwardTrace, ModelConfig, forward, get_preset


@pytest.fixture
def traces(toy_teacher, toy_student, toy_tokens, toy_mask):
    return forward(toy_student, toy_tokens, toy_mask), forward(toy_teacher, toy_tokens, toy_mask)


# -- output distribution ------------------------------------------------------------

def test_od_identical_uniform_is_log4():
    z = np.zeros((3, 4))
    assert od_loss(z, Tensor(z), 1.0, np.ones(3, bool)).item() == pytest.approx(math.log(4))


def test_od_identical_logits_zero_gradient(rng):
    z = rng.standard_normal((2, 5, 7))
    student = Tensor(z.copy(), requires_grad=True)
    od_loss(z, student, 2.0, np.ones((2, 5), bool)).backward()
    assert np.abs(student.grad).max() < 1e-10


def test_od_temperature_two_matches_direct_formula(rng):
    zt, zs = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    direct = 0.0
    for r in range(3):
        pt = np.exp(zt[r] / 2) / np.exp(zt[r] / 2).sum()
        ps = np.exp(zs[r] / 2) / np.exp(zs[r] / 2).sum()
        direct += -sum(pt[c] * math.log(ps[c]) for c in range(5)) / 3
    assert od_loss(zt, Tensor(zs), 2.0).item() == pytest.approx(4 * direct, abs=1e-12)


def test_od_mask_selects_rows_and_rejects_empty(rng):
    zt, zs = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    mask = np.array([True, False, True, False])
    assert od_loss(zt, Tensor(zs), 1.0, mask).item() == pytest.approx(
        od_loss(zt[mask], Tensor(zs[mask]), 1.0).item(), abs=1e-14)
    with pytest.raises(ValueError, match="no positions"):
        od_loss(zt, Tensor(zs), 1.0, np.zeros(4, bool))


# -- hidden states ------------------------------------------------------------------

def fake_trace(hidden, mask=None, cfg=None):
    hidden = [h if isinstance(h, Tensor) else Tensor(h) for h in hidden]
    if mask is None:
        mask = np.ones(hidden[0].shape[:-1], bool)
    return ForwardTrace(hidden, [], [], [], [], None, mask, cfg)


def test_hs_identity_projection_identical_traces(toy_teacher, toy_tokens):
    trace = forward(toy_teacher, toy_tokens)
    mapping = build_mapping("last", 2, 2)
    bank = ProjectionBank.for_hidden_states(mapping, 16, 16, None, identity=True)
    assert hs_loss(trace, trace, mapping, bank).item() == 0.0


def test_hs_zero_student_ones_teacher_is_one():
    mapping = LayerMapping(1, 1, {1: (1,)})
    s = fake_trace([np.zeros((3, 4)), np.zeros((3, 4))])
    t = fake_trace([np.ones((3, 5)), np.ones((3, 5))])
    bank = ProjectionBank(hs={(1, 1): Tensor(np.zeros((4, 5)), requires_grad=True)})
    assert hs_loss(s, t, mapping, bank).item() == 1.0


def test_hs_is_sum_of_single_pair_losses(traces, rng):
    s, t = traces
    mapping = LayerMapping(1, 2, {1: (1, 2)})
    bank = ProjectionBank.for_hidden_states(mapping, 8, 16, rng)
    both = hs_loss(s, t, mapping, bank).item()
    singles = sum(hs_loss(s, t, LayerMapping(1, 2, {1: (j,)}),
                          ProjectionBank(hs={(1, j): bank.hs[(1, j)]})).item() for j in (1, 2))
    assert both == pytest.approx(singles, abs=1e-14)


def test_hs_missing_projection(traces):
    s, t = traces
    with pytest.raises(KeyError, match="no projection"):
        hs_loss(s, t, LayerMapping(1, 2, {1: (2,)}), ProjectionBank())


def test_hs_ignores_padded_rows(rng):
    mapping = LayerMapping(1, 1, {1: (1,)})
    hs_, ht = rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 3, 4))
    w = ProjectionBank(hs={(1, 1): Tensor(rng.standard_normal((4, 4)))})
    mask = np.array([[1, 1, 0]], bool)
    garbage = hs_.copy()
    garbage[0, 2] = 1e3
    a = hs_loss(fake_trace([hs_, hs_], mask), fake_trace([ht, ht]), mapping, w).item()
    b = hs_loss(fake_trace([garbage, garbage], mask), fake_trace([ht, ht]), mapping, w).item()
    assert a == pytest.approx(b, abs=1e-12)


# -- cosine hidden states -----------------------------------------------------------

def test_cosine_examples(rng):
    mapping = LayerMapping(1, 1, {1: (1,)})
    h = rng.standard_normal((4, 6))
    t = fake_trace([h, h])
    assert cosine_hs_loss(fake_trace([h, h]), t, mapping).item() == pytest.approx(0, abs=1e-14)
    assert cosine_hs_loss(fake_trace([h, -h]), t, mapping).item() == pytest.approx(2.0)
    scaled = h.copy()
    scaled[1] *= 5
    assert cosine_hs_loss(fake_trace([h, scaled]), t, mapping).item() == pytest.approx(
        0, abs=1e-14)


def test_cosine_requires_equal_sizes(traces):
    s, t = traces
    with pytest.raises(Exception, match="equal hidden sizes"):
        cosine_hs_loss(s, t, LayerMapping(1, 2, {1: (2,)}))


# -- relation heads -----------------------------------------------------------------

def test_concat_resplit_examples(rng):
    heads = [Tensor(rng.standard_normal((5, 64))) for _ in range(12)]
    out = concat_resplit(heads, 48)
    assert len(out) == 48 and all(o.shape == (5, 16) for o in out)
    np.testing.assert_array_equal(np.concatenate([o.data for o in out], -1),
                                  np.concatenate([h.data for h in heads], -1))
    same = concat_resplit(heads, 12)
    for a, b in zip(same, heads):
        np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(SpecError):
        concat_resplit(heads, 7)


def test_resplit_heads_matches_list_version(rng):
    x = Tensor(rng.standard_normal((2, 4, 3, 6)))
    batched = resplit_heads(x, 8).data
    for b in range(2):
        listed = concat_resplit([Tensor(x.data[b, h]) for h in range(4)], 8)
        for r in range(8):
            np.testing.assert_array_equal(batched[b, r], listed[r].data)


def test_relation_matrix_examples(rng):
    np.testing.assert_array_equal(relation_matrix(Tensor(rng.standard_normal((1, 5)))).data,
                                  [[1.0]])
    a = rng.standard_normal((6, 4))
    r = relation_matrix(Tensor(a)).data
    np.testing.assert_allclose(r.sum(-1), 1.0, atol=1e-12)
    w = random_orthogonal(rng, 4)
    np.testing.assert_allclose(relation_matrix(Tensor(a @ w)).data, r, atol=1e-9)


def test_orthogonalize_gives_orthonormal_rows(rng):
    w = orthogonalize(rng.standard_normal((3, 4, 6)))
    for m in w:
        np.testing.assert_allclose(m @ m.T, np.eye(4), atol=1e-12)


# -- MiniLMv2 ------------------------------------------------------------------------

def scalar_minilm(qkv_s, qkv_t, ar):
    """Loops over kinds, relation heads and rows; inputs are per-head (A_h, n, d_k) arrays."""
    def relation_rows(per_head, a):
        n = per_head.shape[1]
        vecs = [np.concatenate([per_head[h, p] for h in range(per_head.shape[0])])
                for p in range(n)]
        width = len(vecs[0]) // ar
        rows = []
        for p in range(n):
            scores = [sum(vecs[p][a * width + c] * vecs[q][a * width + c] for c in range(width))
                      / math.sqrt(width) for q in range(n)]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            rows.append([x / sum(e) for x in e])
        return rows

    total = 0.0
    for kind in range(3):
        for a in range(ar):
            rt, rs = relation_rows(qkv_t[kind], a), relation_rows(qkv_s[kind], a)
            ce = [-sum(rt[p][q] * math.log(rs[p][q]) for q in range(len(rt)))
                  for p in range(len(rt))]
            total += sum(ce) / len(ce)
    return total


def test_minilmv2_matches_scalar_loop_oracle(toy_teacher, toy_student):
    tokens = np.array([4, 9])
    s, t = forward(toy_student, tokens), forward(toy_teacher, tokens)
    ours = minilmv2_loss(s, t, None, 2, 2).item()
    qkv_s = [x.data for x in (s.queries[0], s.keys[0], s.values[0])]
    qkv_t = [x.data for x in (t.queries[1], t.keys[1], t.values[1])]
    assert ours == pytest.approx(scalar_minilm(qkv_s, qkv_t, 2), abs=1e-10)


def test_minilmv2_self_distillation_floor(toy_teacher, toy_tokens, toy_mask):
    trace = forward(toy_teacher, toy_tokens, toy_mask)
    loss = minilmv2_loss(trace, forward(toy_teacher, toy_tokens, toy_mask), None, 2, 4)
    entropies = 0.0
    for per_head in (trace.queries[1], trace.keys[1], trace.values[1]):
        rel = relation_matrix(resplit_heads(Tensor(per_head.data), 4), toy_mask).data
        ent = -(rel * np.log(np.where(rel > 0, rel, 1.0))).sum(-1)   # (B, A_r, n)
        rows = np.broadcast_to(toy_mask[:, None, :].astype(bool), ent.shape)
        entropies += 4 * ent[rows].mean()
    assert loss.item() == pytest.approx(entropies, abs=1e-10)
    loss.backward()
    grads = [p.grad for p in toy_teacher.parameters() if p.grad is not None]
    assert grads and max(np.abs(g).max() for g in grads) < 1e-9


def test_minilmv2_single_token_is_zero(toy_teacher, toy_student):
    s, t = forward(toy_student, np.array([5])), forward(toy_teacher, np.array([5]))
    assert minilmv2_loss(s, t, None, 2, 2).item() == pytest.approx(0.0, abs=1e-15)


# -- DirectMiniLM and Gram MSE --------------------------------------------------------

def test_direct_identity_identical_traces(toy_teacher, toy_tokens):
    trace = forward(toy_teacher, toy_tokens)
    bank = ProjectionBank.for_relation_heads(4, 16, 16, None, identity=True)
    assert direct_minilm_loss(trace, trace, None, 2, 4, bank).item() == 0.0


def test_direct_decomposes_into_per_head_terms(traces, rng):
    s, t = traces
    ar = 2
    bank = ProjectionBank.for_relation_heads(ar, 8, 16, rng)
    total = direct_minilm_loss(s, t, None, 2, ar, bank).item()
    mask = s.mask.astype(bool)
    expected = 0.0
    for kind in "QKV":
        a_s = resplit_heads(s.qkv(kind, 1), ar).data
        a_t = resplit_heads(t.qkv(kind, 2), ar).data
        for a in range(ar):
            diff = a_s[:, a] @ bank.mha[kind].data[a] - a_t[:, a]
            expected += (diff[mask] ** 2).mean()
    assert total == pytest.approx(expected, abs=1e-12)


def test_direct_missing_projection(traces):
    s, t = traces
    with pytest.raises(KeyError):
        direct_minilm_loss(s, t, None, 2, 2, ProjectionBank())


def test_gram_mse_examples(toy_teacher, toy_student, traces, rng):
    s, t = traces
    assert gram_mse_loss(t, t, None, 2, 2).item() == 0.0
    one_s, one_t = forward(toy_student, np.array([6])), forward(toy_teacher, np.array([6]))
    expected = 0.0
    for kind in "QKV":
        a = resplit_heads(one_s.qkv(kind, 1), 2).data
        b = resplit_heads(one_t.qkv(kind, 2), 2).data
        for h in range(2):
            expected += ((a[h] ** 2).sum() - (b[h] ** 2).sum()) ** 2
    assert gram_mse_loss(one_s, one_t, None, 2, 2).item() == pytest.approx(expected, rel=1e-12)


def test_gram_mse_orthogonal_invariance(traces, rng):
    s, t = traces
    ar = 2
    rotations = [np.stack([random_orthogonal(rng, 4) for _ in range(ar)]) for _ in range(3)]
    base = gram_mse_loss(s, t, None, 2, ar).item()
    rotated = gram_mse_loss(rotate_student(s, ar, rotations), t, None, 2, ar).item()
    assert rotated == pytest.approx(base, abs=1e-9)


# -- shared projection path -----------------------------------------------------------

def test_hs_and_direct_share_projected_mse(traces, rng, monkeypatch):
    s, t = traces
    calls = []
    original = O.projected_mse

    def spy(*args, **kwargs):
        calls.append(args[2])
        return original(*args, **kwargs)

    monkeypatch.setattr(O, "projected_mse", spy)
    mapping = build_mapping("uniform+last", 1, 2)
    hs_bank = ProjectionBank.for_hidden_states(mapping, 8, 16, rng)
    hs_loss(s, t, mapping, hs_bank)
    assert [id(w) for w in calls] == [id(hs_bank.hs[p]) for p in mapping.pairs()]
    calls.clear()
    mha_bank = ProjectionBank.for_relation_heads(2, 8, 16, rng)
    direct_minilm_loss(s, t, None, 2, 2, mha_bank)
    assert [id(w) for w in calls] == [id(mha_bank.mha[k]) for k in "QKV"]


def test_hs_loss_on_swapped_inputs_reproduces_direct(traces, rng):
    s, t = traces
    ar = 2
    bank = ProjectionBank.for_relation_heads(ar, 8, 16, rng)
    direct = direct_minilm_loss(s, t, None, 2, ar, bank).item()
    total = 0.0
    for kind in "QKV":
        # relation heads fed through the hidden-state fields
        s_swap = fake_trace([Tensor(0), resplit_heads(s.qkv(kind, 1), ar)], s.mask)
        t_swap = fake_trace([Tensor(0), Tensor(0), resplit_heads(t.qkv(kind, 2), ar)], t.mask)
        total += hs_loss(s_swap, t_swap, LayerMapping(1, 2, {1: (2,)}),
                         ProjectionBank(hs={(1, 2): bank.mha[kind]})).item()
    assert ar * total == pytest.approx(direct, abs=1e-12)


# -- DistillSpec ---------------------------------------------------------------------------

def test_spec_relation_heads_on_full_teacher():
    teacher, student = get_preset("teacher"), get_preset("3l")
    spec = DistillSpec("minilmv2", teacher_layer="L-1", relation_heads=48).resolve(student, teacher)
    assert spec.teacher_layer == 11 and spec.relation_heads == 48
    with pytest.raises(SpecError, match="divide"):
        DistillSpec("minilmv2", relation_heads=7).resolve(student, teacher)
    assert default_relation_heads("minilmv2", student, teacher) == 48


def test_spec_direct_defaults_to_student_heads():
    teacher, student = get_preset("teacher"), get_preset("6l")
    spec = DistillSpec("DirectMiniLM").resolve(student, teacher)
    assert spec.relation_heads == student.num_heads == 12
    assert spec.orthogonality_constraint is False


def test_spec_unexplored_teacher_layer_warns_or_raises():
    teacher, student = get_preset("teacher"), get_preset("3l")
    spec = DistillSpec("minilmv2", teacher_layer="L-3")
    with pytest.warns(UserWarning, match="explored"):
        spec.resolve(student, teacher)
    with pytest.raises(SpecError, match="explored"):
        spec.resolve(student, teacher, strict=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        DistillSpec("minilmv2", teacher_layer="L-2").resolve(student, teacher)


@pytest.mark.parametrize("spec, message", [
    (DistillSpec("od", temperature=0.0), "temperature"),
    (DistillSpec("hs"), "strategy"),
    (DistillSpec("hs", "diagonal"), "unknown layer mapping"),
    (DistillSpec("cosine-hs", "last"), "equal hidden sizes"),
    (DistillSpec("minilmv2", teacher_layer=13), "outside"),
])
def test_spec_errors(spec, message):
    with pytest.raises((SpecError, ValueError), match=message):
        spec.resolve(get_preset("6l"), get_preset("teacher"))


def test_unknown_method():
    with pytest.raises(SpecError, match="unknown distillation method"):
        DistillSpec("tinybert")


@pytest.mark.parametrize("value, expected", [("L", 12), ("L-1", 11), ("l - 2", 10), (7, 7),
                                             ("9", 9)])
def test_parse_teacher_layer(value, expected):
    assert parse_teacher_layer(value, 12) == expected


def test_hs_projection_shapes():
    spec = DistillSpec("hs", "uniform+last")
    bank = spec.make_projections(get_preset("6l"), get_preset("teacher"),
                                 np.random.default_rng(0))
    assert len(bank.hs) == 11
    assert all(w.shape == (384, 768) for w in bank.hs.values())
    restored = ProjectionBank.from_state(bank.state_dict())
    assert restored.hs.keys() == bank.hs.keys()
