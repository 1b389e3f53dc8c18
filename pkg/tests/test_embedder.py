import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sselearn.corpus import SpeechInterval
from sselearn.embedder import (
    EncoderConfig,
    EncoderModel,
    embed_intervals,
    encode,
    load_checkpoint,
    maxpool_baseline,
    ntxent_loss,
    project,
    save_checkpoint,
    train,
)
from sselearn.errors import DataError, FormatError, NumericalError
from sselearn.features import FeatureSequence, FeatureStore
from sselearn.sampling import PositivePair, sample_topline_pairs

from oracles import finite_difference, naive_ntxent

TAU = 0.15


def _cfg(**kw):
    base = dict(input_dim=6, conv_channels=8, n_heads=2, ffn_dim=16, projection_dim=8, batch_pairs=4)
    base.update(kw)
    return EncoderConfig(**base)


# ---------------------------------------------------------------- loss


def test_loss_single_pair_is_zero():
    z = np.random.default_rng(0).normal(size=(2, 5))
    assert ntxent_loss(z, TAU)[0] == 0.0


def test_loss_orthogonal_two_pairs():
    e = np.eye(4)
    z = np.stack([e[0], e[0], e[1], e[1]])
    expected = -math.log(math.exp(1 / TAU) / (math.exp(1 / TAU) + 2))
    loss, _ = ntxent_loss(z, TAU)
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(naive_ntxent(z, TAU), abs=1e-12)


@given(n=st.integers(1, 6), seed=st.integers(0, 10**6), tau=st.floats(0.05, 2.0))
def test_loss_matches_naive(n, seed, tau):
    z = np.random.default_rng(seed).normal(size=(2 * n, 7))
    assert ntxent_loss(z, tau)[0] == pytest.approx(naive_ntxent(z, tau), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_loss_uniform_similarity_is_log_2n_minus_1(n):
    same = np.ones((2 * n, 3))
    assert ntxent_loss(same, TAU)[0] == pytest.approx(math.log(2 * n - 1), abs=1e-12)
    # regular simplex vertices: every off-diagonal cosine equals -1/(2n-1)
    simplex = np.eye(2 * n) - 1.0 / (2 * n)
    assert ntxent_loss(simplex, TAU)[0] == pytest.approx(math.log(2 * n - 1), abs=1e-12)


@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_loss_scale_invariant(seed, scale):
    z = np.random.default_rng(seed).normal(size=(6, 4))
    a, ga = ntxent_loss(z, TAU)
    b, gb = ntxent_loss(z * scale, TAU)
    assert a == pytest.approx(b, abs=1e-9)
    np.testing.assert_allclose(gb * scale, ga, atol=1e-9)


@pytest.mark.parametrize("n", [2, 4])
def test_gradient_finite_difference(n):
    z = np.random.default_rng(n).normal(size=(2 * n, 5))
    _, g = ntxent_loss(z, TAU)
    num = finite_difference(lambda v: ntxent_loss(v, TAU)[0], z)
    rel = np.abs(g - num).max() / max(np.abs(num).max(), 1e-12)
    assert rel < 1e-4


def test_loss_zero_norm_raises():
    z = np.ones((4, 3))
    z[2] = 0
    with pytest.raises(NumericalError, match="2"):
        ntxent_loss(z, TAU)


def test_loss_nonfinite_raises():
    z = np.ones((4, 3))
    z[1, 0] = np.inf
    with pytest.raises(NumericalError):
        ntxent_loss(z, TAU)


# ---------------------------------------------------------------- encoder


def test_encode_deterministic_and_shape():
    torch.manual_seed(0)
    m = EncoderModel(_cfg())
    f = np.tile(np.random.default_rng(0).normal(size=(1, 6)), (12, 1))
    a, b = encode(m, f), encode(m, f)
    assert a.shape == (8,)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_encode_positions_matter():
    torch.manual_seed(1)
    m = EncoderModel(_cfg())
    f = np.random.default_rng(1).normal(size=(10, 6)).astype(np.float32)
    g = f.copy()
    g[[2, 7]] = g[[7, 2]]
    assert not np.allclose(encode(m, f), encode(m, g))


def test_encode_minimum_length_and_too_short():
    m = EncoderModel(_cfg())
    assert encode(m, np.ones((4, 6))).shape == (8,)
    with pytest.raises(DataError):
        encode(m, np.ones((3, 6)))


def test_encode_training_mode_uses_dropout():
    torch.manual_seed(2)
    m = EncoderModel(_cfg(dropout_p=0.5))
    f = np.random.default_rng(2).normal(size=(20, 6))
    assert not np.array_equal(encode(m, f, "training"), encode(m, f, "training"))
    assert np.array_equal(encode(m, f), encode(m, f))


def test_padding_does_not_leak():
    """A sequence embeds the same alone and next to a longer batch mate."""
    torch.manual_seed(3)
    m = EncoderModel(_cfg()).eval()
    rng = np.random.default_rng(3)
    short, long = rng.normal(size=(7, 6)).astype(np.float32), rng.normal(size=(19, 6)).astype(np.float32)
    x = torch.zeros(2, 19, 6)
    x[0, :7] = torch.from_numpy(short)
    x[1] = torch.from_numpy(long)
    with torch.no_grad():
        batched = m(x, torch.tensor([7, 19]))[0].numpy()
    np.testing.assert_allclose(batched, encode(m, short), atol=1e-5)


def test_project_zero_weights():
    m = EncoderModel(_cfg())
    with torch.no_grad():
        for p in m.head.parameters():
            p.zero_()
    out = project(m, np.random.default_rng(0).normal(size=(3, 8)))
    assert np.all(out == 0)


def test_project_identity_head():
    m = EncoderModel(_cfg())
    with torch.no_grad():
        for layer in (m.head[0], m.head[2]):
            layer.weight.copy_(torch.eye(8))
            layer.bias.zero_()
    z = np.abs(np.random.default_rng(0).normal(size=(5, 8))).astype(np.float32)
    np.testing.assert_array_equal(project(m, z), z)


@given(c=st.sampled_from([4, 8, 12]), seed=st.integers(0, 100))
def test_project_output_dim(c, seed):
    cfg = _cfg(conv_channels=c, n_heads=2, projection_dim=c)
    m = EncoderModel(cfg)
    assert project(m, np.ones((2, c))).shape == (2, cfg.projection_dim)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(conv_channels=7, n_heads=1)
    with pytest.raises(ValueError):
        EncoderConfig(temperature=0)


# ---------------------------------------------------------------- training and inference


def _toy_store():
    rng = np.random.default_rng(0)
    store = FeatureStore(100.0, normalize_features=False)
    store.add_file("f", FeatureSequence(rng.normal(size=(400, 6)), 100.0))
    return store


def _toy_pairs(n=40):
    rng = np.random.default_rng(1)
    out = []
    for _ in range(n):
        s = rng.integers(0, 300) / 100
        out.append(PositivePair(SpeechInterval("f", s, s + 0.2), SpeechInterval("f", s + 0.01, s + 0.2), "stretch"))
    return out


def test_train_deterministic():
    store, pairs = _toy_store(), _toy_pairs()
    cfg = _cfg(max_steps=12, eval_every=4, seed=5)
    m1, l1 = train(pairs, store, cfg)
    m2, l2 = train(pairs, store, cfg)
    assert l1.rows == l2.rows
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)


def test_train_empty_pairs():
    with pytest.raises(DataError):
        train([], _toy_store(), _cfg())


def test_train_unresolvable_span():
    bad = [PositivePair(SpeechInterval("g", 0, 0.1), SpeechInterval("g", 0.1, 0.2), "mined")] * 4
    with pytest.raises(DataError):
        train(bad, _toy_store(), _cfg())


def test_train_log_csv(tmp_path):
    _, log = train(_toy_pairs(), _toy_store(), _cfg(max_steps=6, eval_every=3))
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,loss,dev_loss"
    assert len(lines) == 7
    assert lines[3].split(",")[2] != "" and lines[1].split(",")[2] == ""


def test_train_topline_beats_chance(small_corpus, small_store):
    store, _ = small_store
    al = small_corpus.load_alignments()
    pairs = sample_topline_pairs(al, np.random.default_rng(0), 600, 1.0, 0.04)
    cfg = EncoderConfig(batch_pairs=16, max_steps=150, eval_every=50, patience=150)
    _, log = train(pairs, store, cfg)
    assert log.best_dev_loss < math.log(2 * cfg.batch_pairs - 1)


def test_embed_intervals_rows():
    store = _toy_store()
    m = EncoderModel(_cfg())
    ivs = [SpeechInterval("f", 0.1, 0.3), SpeechInterval("f", 1.0, 1.5), SpeechInterval("f", 0.1, 0.3)]
    emb = embed_intervals(m, ivs, store)
    assert emb.shape == (3, 8)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(emb[0], emb[2])
    with pytest.raises(DataError):
        embed_intervals(m, [SpeechInterval("f", 3.9, 4.5)], store)


# ---------------------------------------------------------------- max-pool baseline


def test_maxpool_single_frame():
    np.testing.assert_allclose(maxpool_baseline(np.array([[3.0, 4.0]])), [0.6, 0.8])


def test_maxpool_two_frames():
    np.testing.assert_allclose(maxpool_baseline(np.array([[1.0, 0.0], [0.0, 1.0]])), [0.7071, 0.7071], atol=1e-4)


@given(seed=st.integers(0, 10**6))
def test_maxpool_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(9, 4)) + 3
    assert np.array_equal(maxpool_baseline(x), maxpool_baseline(x[rng.permutation(9)]))


# ---------------------------------------------------------------- checkpoints


@given(seed=st.integers(0, 1000), c=st.sampled_from([4, 8, 16]))
def test_checkpoint_round_trip(tmp_path_factory, seed, c):
    torch.manual_seed(seed)
    m = EncoderModel(_cfg(conv_channels=c, n_heads=2, projection_dim=c, seed=seed))
    path = tmp_path_factory.mktemp("ck") / "m.ssem"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert m2.cfg == m.cfg
    for (k1, a), (k2, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert k1 == k2 and torch.equal(a, b)


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    save_checkpoint(EncoderModel(_cfg()), tmp_path / "m.ssem")
    raw = (tmp_path / "m.ssem").read_bytes()
    (tmp_path / "bad.ssem").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "cut.ssem").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ssem")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "cut.ssem")
