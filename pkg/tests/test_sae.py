import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from steerlab.lm.model import DTYPE
from steerlab.sae import (
    ActivationCorpus,
    DensityConfig,
    SaeModel,
    SaeTrainConfig,
    active_features,
    activation_density,
    classify_density,
    collect_activations,
    decode,
    encode,
    feature_activations,
    sae_loss,
    sparsity_stats,
    top_activations,
    train_sae,
)


def small_sae(seed=0, lam=0.1):
    rng = np.random.default_rng(seed)
    return SaeModel.from_arrays(
        rng.normal(size=(8, 4)), rng.normal(size=8), rng.normal(size=(4, 8)), rng.normal(size=4), lam
    )


def test_encode_matches_dense_oracle():
    s = small_sae()
    x = np.random.default_rng(9).normal(size=(5, 4))
    W_enc, b_enc = s.W_enc.detach().numpy(), s.b_enc.detach().numpy()
    b_dec = s.b_dec.detach().numpy()
    want = np.maximum(0, (x - b_dec) @ W_enc.T + b_enc)
    assert np.allclose(encode(s, x).detach().numpy(), want, rtol=0, atol=1e-12)


def test_decode_matches_dense_oracle():
    s = small_sae()
    f = np.abs(np.random.default_rng(8).normal(size=(3, 8)))
    want = f @ s.W_dec.detach().numpy().T + s.b_dec.detach().numpy()
    assert np.allclose(decode(s, f).detach().numpy(), want, rtol=0, atol=1e-12)


def test_encode_at_decoder_bias_is_zero():
    s = small_sae()
    with torch.no_grad():
        s.b_enc.zero_()
    assert torch.count_nonzero(encode(s, s.b_dec.detach())) == 0


def test_decode_zero_and_one_hot():
    s = SaeModel(4, 8, seed=2)
    assert torch.equal(decode(s, torch.zeros(8, dtype=DTYPE)), s.b_dec)
    with torch.no_grad():
        s.b_dec.zero_()
    col = decode(s, torch.eye(8, dtype=DTYPE)[3])
    assert torch.allclose(col, s.W_dec[:, 3])
    assert abs(float(col.detach().norm()) - 1) < 1e-12


@settings(max_examples=30)
@given(arrays(np.float64, (6, 4), elements=st.floats(-50, 50)))
def test_encode_nonnegative(x):
    assert (encode(small_sae(), x) >= 0).all()


def test_dimension_checks():
    s = small_sae()
    with pytest.raises(ValueError):
        encode(s, np.zeros(5))
    with pytest.raises(ValueError):
        decode(s, np.zeros(4))
    with pytest.raises(IndexError):
        s.direction(8)
    with pytest.raises(ValueError):
        SaeModel(4, 8, lambda_l1=-1)
    with pytest.raises(ValueError):
        SaeModel.from_arrays(np.zeros((8, 4)), np.zeros(8), np.zeros((8, 4)), np.zeros(4))


def test_loss_matches_formula():
    s = small_sae(lam=0.37)
    x = np.random.default_rng(4).normal(size=(7, 4))
    f = np.maximum(0, (x - s.b_dec.detach().numpy()) @ s.W_enc.detach().numpy().T + s.b_enc.detach().numpy())
    xh = f @ s.W_dec.detach().numpy().T + s.b_dec.detach().numpy()
    l2 = ((x - xh) ** 2).sum(axis=1).mean()
    l1 = np.abs(f).sum(axis=1).mean()
    total, t2, t1 = (t.detach() for t in sae_loss(s, x))
    assert abs(float(t2) - l2) < 1e-12
    assert abs(float(t1) - l1) < 1e-12
    assert abs(float(total) - (l2 + 0.37 * l1)) < 1e-12


def test_loss_zero_at_perfect_reconstruction():
    s = SaeModel.from_arrays(np.zeros((8, 4)), np.zeros(8), np.eye(4, 8), np.zeros(4), lambda_l1=0.5)
    total, l2, l1 = (t.detach() for t in sae_loss(s, np.zeros((3, 4))))
    assert float(total) == 0.0
    s0 = small_sae(lam=0.0)
    x = np.ones((2, 4))
    total, l2, _ = (t.detach() for t in sae_loss(s0, x))
    assert float(total) == float(l2)


def test_sae_gradients_match_fd():
    s = small_sae(lam=0.2)
    x = torch.as_tensor(np.random.default_rng(3).normal(size=(6, 4)))
    s.zero_grad()
    sae_loss(s, x)[0].backward()
    eps, bad = 1e-4, 0
    with torch.no_grad():
        for p in s.parameters():
            for idx in np.ndindex(*p.shape):
                g = float(p.grad[idx])
                orig = float(p[idx])
                p[idx] = orig + eps
                up = float(sae_loss(s, x)[0])
                p[idx] = orig - eps
                dn = float(sae_loss(s, x)[0])
                p[idx] = orig
                fd = (up - dn) / (2 * eps)
                bad += abs(fd - g) > 1e-3 * max(abs(fd), abs(g), 1e-8)
    assert bad == 0


def low_rank_data(n=2000, d=8, rank=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, rank)) @ rng.normal(size=(rank, d))


def test_training_reconstructs_low_rank_data():
    x = low_rank_data()
    r = train_sae(x, SaeTrainConfig(lambda_l1=0.0, steps=1500, lr=3e-3, expansion=2))
    assert r.held_out_l2 < 0.01 * r.held_out_l2_init
    assert r.held_out_l2 < 0.05


def test_decoder_columns_unit_norm_after_training():
    r = train_sae(low_rank_data(n=300), SaeTrainConfig(steps=30))
    norms = r.sae.W_dec.norm(dim=0)
    assert torch.allclose(norms, torch.ones_like(norms), rtol=0, atol=1e-9)


def test_sparsity_decreases_with_lambda():
    x = low_rank_data(rank=4)
    l0 = [train_sae(x, SaeTrainConfig(lambda_l1=lam, steps=400, expansion=4)).held_out_l0 for lam in (0.0, 1e-2, 1e-1)]
    assert l0[0] > l0[1] > l0[2]


def test_training_deterministic_and_validated():
    x = low_rank_data(n=200)
    a = train_sae(x, SaeTrainConfig(steps=20))
    b = train_sae(x, SaeTrainConfig(steps=20))
    assert a.trace == b.trace
    with pytest.raises(ValueError):
        train_sae(np.zeros((0, 4)))


def _toy_corpus(values):
    """One-dimensional activation corpus: the feature reads x directly."""
    v = torch.as_tensor(np.asarray(values, dtype=float)).reshape(-1, 1)
    n = len(v)
    tokens = np.arange(n) % 10
    return ActivationCorpus(v, np.zeros(n, dtype=int), np.arange(n), tokens, [tokens.tolist()])


def identity_sae():
    return SaeModel.from_arrays([[1.0], [0.0]], [0.0, 0.0], [[1.0, 0.0]], [0.0])


def test_feature_activations_and_dead_detection():
    c = _toy_corpus([0.5, -1.0, 2.0])
    s = identity_sae()
    assert feature_activations(s, c, 0).tolist() == [0.5, 0.0, 2.0]
    assert active_features(s, c.vectors).tolist() == [True, False]
    d = activation_density(s, 1, c)
    assert d.degenerate and d.klass is None and d.n_positive == 0


def test_density_histogram_conservation():
    vals = np.random.default_rng(0).exponential(size=500)
    d = activation_density(identity_sae(), 0, _toy_corpus(vals))
    assert d.counts.sum() == d.n_positive == 500
    assert d.bin_edges[0] == 0.0 and d.bin_edges[-1] == vals.max()
    assert d.nonzero_fraction == 1.0


def test_classifier_flat_vs_cluster():
    rng = np.random.default_rng(1)
    flat = rng.exponential(0.2, size=3000)
    cluster = np.concatenate([flat, rng.normal(5.0, 0.1, size=300)])
    assert classify_density(flat) == "flat-tail"
    assert classify_density(cluster) == "tail-cluster"
    assert classify_density(np.full(10, 2.0)) == "flat-tail"
    # the dip requirement is configurable
    assert classify_density(cluster, DensityConfig(min_dip=1.0)) == "flat-tail"


def test_top_activations_against_scan():
    vals = np.random.default_rng(5).normal(size=100)
    vals[[10, 40]] = vals.max() + 1  # a tie
    c = _toy_corpus(vals)
    dos = top_activations(identity_sae(), 0, c, k=7, window=2)
    order = sorted(range(100), key=lambda i: (-vals[i], i))
    want = [i for i in order if vals[i] > 0][:7]
    assert [r.position for r in dos.top_contexts] == want
    acts = [r.activation for r in dos.top_contexts]
    assert acts == sorted(acts, reverse=True)
    assert not dos.truncated
    k1 = top_activations(identity_sae(), 0, c, k=1)
    assert k1.top_contexts[0].activation == vals.max()


def test_top_activations_truncates():
    c = _toy_corpus([1.0, -1.0, 2.0])
    dos = top_activations(identity_sae(), 0, c, k=5)
    assert dos.truncated and len(dos.top_contexts) == 2
    with pytest.raises(ValueError):
        top_activations(identity_sae(), 0, c, k=0)


def test_collect_activations(tiny_lm):
    from steerlab.lm.vocab import render_prompt
    from steerlab.game import enumerate_histories

    seqs = [render_prompt(h, context_window=128) for h in enumerate_histories(1)][:2] + [[0, 1, 2]]
    c = collect_activations(tiny_lm, seqs, layer=1)
    assert len(c) == sum(len(s) for s in seqs)
    assert c.vectors.shape[1] == tiny_lm.cfg.d_model
    from steerlab.lm.model import forward

    res, _ = forward(tiny_lm, seqs[2])
    assert torch.allclose(c.vectors[-3:], res[1], rtol=0, atol=1e-12)
    assert c.tokens[-3:].tolist() == [0, 1, 2]


def test_sparsity_stats():
    s = identity_sae()
    l2, l0 = sparsity_stats(s, torch.tensor([[1.0], [-2.0]], dtype=DTYPE))
    assert l0 == 0.5
    assert l2 == pytest.approx(2.0)
