import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_module_gradient
from oracles import dense_moe, gelu, layer_norm
from videdit.connector import (
    ConnectorConfig,
    EmptyInputError,
    MoEFFN,
    ParameterError,
    connector_forward,
    expert_utilization,
    filter_prefix_tokens,
    gate_select,
    init_connector,
    load_connector,
    moe_ffn_forward,
    save_connector,
)
from videdit.core import InstructionEmbedding


@pytest.fixture(autouse=True)
def float64_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def random_moe(rng, d=4, ff=5, e=3, k=2, gate_scale=1.0):
    moe = MoEFFN(d, ff, e, k).double()
    with torch.no_grad():
        moe.gate.copy_(torch.from_numpy(rng.standard_normal((e, d)) * gate_scale))
        for ex in moe.expert:
            for p in ex.parameters():
                p.copy_(torch.from_numpy(rng.standard_normal(p.shape)))
    return moe


def moe_numpy_params(moe):
    gate = moe.gate.detach().numpy()
    experts = [tuple(getattr(ex, n).detach().numpy() for n in ("W1", "b1", "W2", "b2")) for ex in moe.expert]
    return gate, experts


# --- gate_select -------------------------------------------------------------


def test_gate_select_uniform_logits_break_ties_by_index():
    gate = torch.zeros(6, 4)
    idx, w = gate_select(torch.ones(4), gate, 2)
    assert idx.tolist() == [0, 1]
    assert w.tolist() == [0.5, 0.5]


def test_gate_select_known_logits():
    # gate rows chosen so that W_g x = (2, 1, 0, 0, 0, 0) for x = e_0
    gate = torch.zeros(6, 4)
    gate[0, 0], gate[1, 0] = 2.0, 1.0
    idx, w = gate_select(torch.tensor([1.0, 0, 0, 0]), gate, 2)
    assert idx.tolist() == [0, 1]
    # oracle: full softmax over six logits, keep top two, renormalize
    p = np.exp([2.0, 1.0, 0, 0, 0, 0])
    p /= p.sum()
    expected = p[:2] / p[:2].sum()
    np.testing.assert_allclose(w.numpy(), expected, atol=1e-15)
    np.testing.assert_allclose(w.numpy(), [0.7311, 0.2689], atol=1e-4)


def test_gate_select_full_scale_selects_two(rng):
    gate = torch.from_numpy(rng.standard_normal((6, 8)))
    idx, w = gate_select(torch.from_numpy(rng.standard_normal((100, 8))), gate, 2)
    assert idx.shape == (100, 2)
    assert all(len(set(row)) == 2 for row in idx.tolist())


@pytest.mark.parametrize("k", [0, 7, -1])
def test_gate_select_k_out_of_range(k):
    with pytest.raises(ParameterError):
        gate_select(torch.zeros(4), torch.zeros(6, 4), k)


def test_raw_mass_mode_keeps_softmax_probabilities():
    gate = torch.zeros(6, 4)
    _, w = gate_select(torch.ones(4), gate, 2, renormalize=False)
    np.testing.assert_allclose(w.numpy(), [1 / 6, 1 / 6])


@settings(max_examples=60, deadline=None)
@given(
    logits=st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=8),
    shift=st.floats(-50, 50),
    data=st.data(),
)
def test_gate_weights_sum_to_one_and_shift_invariant(logits, shift, data):
    e = len(logits)
    k = data.draw(st.integers(1, e))
    gate = torch.diag(torch.tensor(logits))
    x = torch.ones(e)
    idx, w = gate_select(x, gate, k)
    assert abs(float(w.sum()) - 1.0) < 1e-12
    assert (w > 0).all()
    assert len(set(idx.tolist())) == k
    # adding a constant to every logit: augment x with a constant feature
    gate2 = torch.cat([gate, torch.full((e, 1), shift)], dim=1)
    idx2, _ = gate_select(torch.cat([x, torch.ones(1)]), gate2, k)
    assert idx2.tolist() == idx.tolist()


def test_scaling_input_preserves_strictly_ordered_selection(rng):
    for _ in range(50):
        gate = torch.from_numpy(rng.standard_normal((6, 4)))
        x = torch.from_numpy(rng.standard_normal(4))
        logits = (gate @ x).numpy()
        if np.min(np.diff(np.sort(logits))) < 1e-3:
            continue
        idx, _ = gate_select(x, gate, 2)
        for c in (0.5, 2.0, 10.0):
            assert gate_select(c * x, gate, 2)[0].tolist() == idx.tolist()


# --- moe_ffn_forward ---------------------------------------------------------


def test_moe_zero_experts_give_zero(rng):
    moe = random_moe(rng)
    with torch.no_grad():
        for ex in moe.expert:
            for p in ex.parameters():
                p.zero_()
    y = moe_ffn_forward(torch.from_numpy(rng.standard_normal((5, 4))), moe)
    assert torch.count_nonzero(y) == 0


def test_moe_k_equals_e_single_nonzero_expert(rng):
    moe = random_moe(rng, e=3, k=3)
    with torch.no_grad():
        for ex in list(moe.expert)[1:]:
            for p in ex.parameters():
                p.zero_()
    x = torch.from_numpy(rng.standard_normal(4))
    y = moe_ffn_forward(x, moe)
    p = torch.softmax(moe.gate @ x, 0)[0]
    np.testing.assert_allclose(y.detach().numpy(), (p * moe.expert[0](x)).detach().numpy(), atol=1e-14)


def test_moe_matches_dense_oracle(rng):
    for _ in range(50):
        moe = random_moe(rng, d=4, e=3, k=2)
        x = rng.standard_normal(4)
        want, _, _ = dense_moe(x, *moe_numpy_params(moe), 2)
        got = moe_ffn_forward(torch.from_numpy(x), moe).detach().numpy()
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)


def test_moe_batched_equals_rowwise(rng):
    moe = random_moe(rng, d=4, e=6, k=2)
    x = torch.from_numpy(rng.standard_normal((3, 7, 4)))
    batched = moe(x)
    for i in range(3):
        for j in range(7):
            torch.testing.assert_close(batched[i, j], moe(x[i, j]), atol=1e-14, rtol=0)


def test_moe_permutation_consistency(rng):
    moe = random_moe(rng, d=4, e=5, k=2)
    x = torch.from_numpy(rng.standard_normal((10, 4)))
    y = moe(x)
    perm = rng.permutation(5)
    moe2 = random_moe(rng, d=4, e=5, k=2)
    with torch.no_grad():
        moe2.gate.copy_(moe.gate[perm])
        for new, old in enumerate(perm):
            for name in ("W1", "b1", "W2", "b2"):
                getattr(moe2.expert[new], name).copy_(getattr(moe.expert[old], name))
    torch.testing.assert_close(moe2(x), y, atol=1e-13, rtol=0)


def test_moe_dimension_mismatch():
    moe = MoEFFN(4, 5, 3, 2)
    with pytest.raises(ParameterError):
        moe(torch.zeros(3))


def test_moe_gradient_matches_finite_differences(rng):
    done = 0
    while done < 10:
        moe = random_moe(rng, d=4, e=3, k=2, gate_scale=3.0)
        x = torch.from_numpy(rng.standard_normal((2, 4)))
        moe(x)
        if moe.last_margin <= 0.1:
            continue
        r = torch.from_numpy(rng.standard_normal((2, 4)))
        err = check_module_gradient(moe, x, lambda y: (y * r).sum(), rng)
        assert err < 1e-4
        done += 1


# --- filter_prefix_tokens ----------------------------------------------------


def test_filter_prefix_identity_when_no_prefix(rng):
    toks = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(filter_prefix_tokens(toks, np.zeros(5, bool)), toks)


def test_filter_prefix_drops_leading_prefix(rng):
    toks = rng.standard_normal((10, 3))
    mask = np.array([True] * 4 + [False] * 6)
    np.testing.assert_array_equal(filter_prefix_tokens(toks, mask), toks[4:])


def test_filter_prefix_interleaved_and_embedding_type(rng):
    toks = rng.standard_normal((4, 2))
    mask = np.array([True, False, True, False])
    expected = np.array([t for t, m in zip(toks, mask) if not m])
    emb = InstructionEmbedding(toks, mask)
    np.testing.assert_array_equal(filter_prefix_tokens(emb), expected)
    t = torch.from_numpy(toks)
    np.testing.assert_array_equal(filter_prefix_tokens(t, mask).numpy(), expected)


def test_filter_prefix_all_prefix_raises():
    with pytest.raises(EmptyInputError):
        filter_prefix_tokens(np.zeros((3, 2)), np.ones(3, bool))


# --- connector ---------------------------------------------------------------


TINY = ConnectorConfig(d_in=3, d_hidden=4, d_out=3, num_queries=2, n_enc_layers=1, n_dec_layers=1,
                       num_experts=3, top_k=2, d_ff=5, n_heads=2)


def test_fresh_connector_outputs_exact_zero(rng):
    for seed in range(5):
        model = init_connector(ConnectorConfig(), seed, dtype=torch.float64)
        y = connector_forward(rng.standard_normal((2, 9, 32)) * 10, model)
        assert y.shape == (2, 8, 32)
        assert torch.count_nonzero(y) == 0


def test_full_scale_query_length_shape():
    cfg = ConnectorConfig.full_scale(d_in=16, d_hidden=16, d_out=8, d_ff=32, n_heads=2)
    model = init_connector(cfg, 0)
    y = model(torch.randn(2, 7, 16, dtype=torch.float32))
    assert y.shape == (2, 512, 8)


def test_connector_shape_errors():
    model = init_connector(TINY, 0)
    with pytest.raises(ParameterError):
        model(torch.zeros(2, 5, 4, dtype=torch.float32))
    with pytest.raises(ParameterError):
        model(torch.zeros(2, 0, 3, dtype=torch.float32))
    with pytest.raises(ParameterError):
        connector_forward(torch.zeros(1, 2, 3), model, ConnectorConfig())


def test_init_deterministic_and_seed_dependent():
    a = init_connector(ConnectorConfig(), 11).state_dict()
    b = init_connector(ConnectorConfig(), 11).state_dict()
    c = init_connector(ConnectorConfig(), 12).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not torch.equal(a["enc.0.self_attn.q.weight"], c["enc.0.self_attn.q.weight"])
    assert float(a["out_proj.weight"].abs().max()) == 0.0
    assert float(a["out_proj.bias"].abs().max()) == 0.0
    # fan-in bound on a sample weight
    assert float(a["in_ffn.fc1.weight"].abs().max()) <= 1 / math.sqrt(32)


def test_connector_identity_attention_matches_hand_composed_pipeline(rng):
    cfg = ConnectorConfig(d_in=3, d_hidden=4, d_out=2, num_queries=1, n_enc_layers=1, n_dec_layers=1,
                          num_experts=1, top_k=1, d_ff=6, n_heads=1)
    model = init_connector(cfg, 3, dtype=torch.float64)
    with torch.no_grad():
        for attn in (model.enc[0].self_attn, model.dec[0].self_attn, model.dec[0].cross_attn):
            for lin in (attn.q, attn.k, attn.v, attn.o):
                lin.weight.copy_(torch.eye(4))
                lin.bias.zero_()
        model.out_proj.weight.copy_(torch.from_numpy(rng.standard_normal((2, 4))))
        model.out_proj.bias.copy_(torch.from_numpy(rng.standard_normal(2)))
    sd = {k: v.numpy() for k, v in model.state_dict().items()}

    def ffn(prefix, v):
        return sd[prefix + "W2"] @ gelu(sd[prefix + "W1"] @ v + sd[prefix + "b1"]) + sd[prefix + "b2"]

    for _ in range(5):
        x = rng.standard_normal(3)
        h = sd["in_ffn.fc2.weight"] @ gelu(sd["in_ffn.fc1.weight"] @ x + sd["in_ffn.fc1.bias"]) + sd["in_ffn.fc2.bias"]
        h = h + layer_norm(h)
        h = h + ffn("enc.0.moe.expert.0.", layer_norm(h))
        q = sd["queries"][0]
        q = q + layer_norm(q)
        q = q + h
        q = q + ffn("dec.0.moe.expert.0.", layer_norm(q))
        want = sd["out_proj.weight"] @ q + sd["out_proj.bias"]
        got = model(torch.from_numpy(x).reshape(1, 1, 3)).detach().numpy()[0, 0]
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


def test_connector_deterministic(rng):
    model = init_connector(TINY, 0, dtype=torch.float64)
    with torch.no_grad():
        model.out_proj.weight.normal_()
    x = torch.from_numpy(rng.standard_normal((2, 5, 3)))
    assert torch.equal(model(x), model(x))


def test_connector_gradient_matches_finite_differences(rng):
    done = 0
    while done < 5:
        model = init_connector(TINY, int(rng.integers(1 << 30)), dtype=torch.float64)
        with torch.no_grad():
            model.out_proj.weight.copy_(torch.from_numpy(rng.standard_normal((3, 4))))
            for moe in model.moe_layers():
                moe.gate.mul_(6.0)
        x = torch.from_numpy(rng.standard_normal((2, 3, 3)))
        model(x)
        if model.min_routing_margin() <= 0.1:
            continue
        r = torch.from_numpy(rng.standard_normal((2, 2, 3)))
        assert check_module_gradient(model, x, lambda y: (y * r).sum(), rng) < 1e-4
        done += 1


def test_routing_histogram_counts(rng):
    model = init_connector(TINY, 0, dtype=torch.float64)
    model(torch.from_numpy(rng.standard_normal((2, 3, 3))))
    # encoder routes 2*3 positions, decoder 2*2 queries, each picks k=2
    assert sum(model.routing_histogram()) == 2 * (6 + 4)


# --- expert_utilization ------------------------------------------------------


def test_utilization_single_position():
    moe = MoEFFN(4, 5, 6, 2)
    with torch.no_grad():
        moe.gate.normal_()
    assert expert_utilization(np.ones((1, 4)), moe).sum() == 2


def test_utilization_uniform_gate_is_near_uniform(rng):
    from scipy.stats import chisquare

    moe = MoEFFN(8, 5, 6, 2).double()
    with torch.no_grad():
        moe.gate.copy_(torch.from_numpy(rng.standard_normal((6, 8)) * 1e-3))
    hist = expert_utilization(rng.standard_normal((2000, 8)), moe)
    assert hist.sum() == 4000
    assert chisquare(hist).pvalue > 1e-3


def test_utilization_dominant_row(rng):
    moe = MoEFFN(4, 5, 6, 2).double()
    with torch.no_grad():
        moe.gate.zero_()
        moe.gate[3] = torch.tensor([100.0, 0, 0, 0])
    x = np.abs(rng.standard_normal((500, 4))) + 0.1
    hist = expert_utilization(x, moe)
    assert hist[3] == 500


# --- serialization -----------------------------------------------------------


def test_save_load_round_trip(tmp_path, rng):
    model = init_connector(TINY, 5, dtype=torch.float64)
    save_connector(model, tmp_path / "conn.npz")
    assert (tmp_path / "conn.json").exists()
    with np.load(tmp_path / "conn.npz") as data:
        assert "dec.0.moe.expert.2.W1" in data.files
        assert "queries" in data.files
    loaded = load_connector(tmp_path / "conn.npz")
    assert loaded.config == TINY
    x = torch.from_numpy(rng.standard_normal((1, 4, 3)))
    assert torch.equal(loaded(x), model(x))
