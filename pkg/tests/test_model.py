import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from dtts.model import (
    ConformerBlock,
    ConvGLU,
    CrossLingualTTS,
    DynamicSpeakerLayerNorm,
    LinguisticEncoder,
    MixDynamicSpeakerLayerNorm,
    SelfAttention,
    TextPredictor,
    VariancePredictor,
    batch_shuffle,
    dsln,
    length_regulate,
    mdsln,
    mix_statistics,
    sample_gamma,
)

D64 = torch.float64


def dsln_oracle(h, e, layer):
    """LN (no affine) then a per-channel 'same' convolution written out by hand."""
    w = (e @ layer.weight_pred.weight.T + layer.weight_pred.bias).reshape(layer.channels, layer.kernel_size)
    b = e @ layer.bias_pred.weight.T + layer.bias_pred.bias
    mu = h.mean(-1, keepdim=True)
    var = ((h - mu) ** 2).mean(-1, keepdim=True)
    x = (h - mu) / torch.sqrt(var + layer.eps)
    n, c = x.shape
    k = layer.kernel_size
    out = torch.zeros_like(x)
    for t in range(n):
        for j in range(k):
            s = t + j - k // 2
            if 0 <= s < n:
                out[t] += w[:, j] * x[s]
    return out + b


@pytest.fixture
def norm_layer():
    torch.manual_seed(0)
    layer = MixDynamicSpeakerLayerNorm(12, 6).to(D64)
    with torch.no_grad():
        for p in layer.parameters():
            p.normal_()
    return layer


# -- DSLN / MDSLN -------------------------------------------------------------

def test_dsln_zero_predictor_gives_zero(norm_layer):
    with torch.no_grad():
        for p in norm_layer.parameters():
            p.zero_()
    out = dsln(torch.randn(2, 5, 12, dtype=D64), torch.randn(2, 6, dtype=D64), norm_layer)
    assert torch.all(out == 0)


def test_dsln_ln_stage_statistics(norm_layer):
    x = norm_layer.normalize(torch.randn(3, 7, 12, dtype=D64) * 5 + 2)
    assert torch.allclose(x.mean(-1), torch.zeros(3, 7, dtype=D64), atol=1e-5)
    assert torch.allclose(x.var(-1, unbiased=False), torch.ones(3, 7, dtype=D64), atol=1e-4)


def test_dsln_matches_oracle(norm_layer):
    h = torch.randn(2, 6, 12, dtype=D64)
    e = torch.randn(2, 6, dtype=D64)
    out = dsln(h, e, norm_layer)
    for b in range(2):
        assert torch.allclose(out[b], dsln_oracle(h[b], e[b], norm_layer), atol=1e-12)


def test_mdsln_degenerate_cases_are_bit_exact(norm_layer):
    h = torch.randn(4, 9, 12, dtype=D64)
    e = torch.randn(4, 6, dtype=D64)
    other = batch_shuffle(e, [2, 0, 3, 1])
    reference = dsln(h, e, norm_layer)
    assert torch.equal(mdsln(h, e, other, torch.ones(4, dtype=D64), norm_layer), reference)
    gamma = torch.rand(4, dtype=D64)
    assert torch.equal(mdsln(h, e, e, gamma, norm_layer), reference)
    assert torch.equal(norm_layer(h, e, other, torch.ones(4, dtype=D64)), reference)


def test_mdsln_matches_composed_oracle(norm_layer):
    h = torch.randn(3, 5, 12, dtype=D64)
    e = torch.randn(3, 6, dtype=D64)
    other = batch_shuffle(e, [1, 2, 0])
    gamma = torch.tensor([0.2, 0.7, 0.5], dtype=D64)
    out = mdsln(h, e, other, gamma, norm_layer)
    for b in range(3):
        own = dsln_oracle(h[b], e[b], norm_layer)
        shuf = dsln_oracle(h[b], other[b], norm_layer)
        # the whole operator is linear in (W, b), so mixing stats = mixing outputs
        assert torch.allclose(out[b], gamma[b] * own + (1 - gamma[b]) * shuf, atol=1e-12)


def test_mix_statistics_endpoints():
    w, ws = torch.randn(3, 4, 3, dtype=D64), torch.randn(3, 4, 3, dtype=D64)
    b, bs = torch.randn(3, 4, dtype=D64), torch.randn(3, 4, dtype=D64)
    one = mix_statistics(w, ws, b, bs, torch.ones(3, dtype=D64))
    zero = mix_statistics(w, ws, b, bs, torch.zeros(3, dtype=D64))
    assert torch.equal(one[0], w) and torch.equal(one[1], b)
    assert torch.equal(zero[0], ws) and torch.equal(zero[1], bs)
    half = mix_statistics(torch.tensor(2.0), torch.tensor(4.0), torch.tensor(0.0), torch.tensor(1.0), 0.5)
    assert float(half[0]) == 3.0 and float(half[1]) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_batch_shuffle_preserves_rows(n, seed):
    e = torch.randn(n, 5, generator=torch.Generator().manual_seed(seed))
    perm = np.random.default_rng(seed).permutation(n)
    out = batch_shuffle(e, perm)
    assert torch.equal(out, e[torch.as_tensor(perm)])
    assert sorted(map(tuple, out.tolist())) == sorted(map(tuple, e.tolist()))


def test_batch_shuffle_identity_and_errors():
    e = torch.randn(3, 2)
    assert torch.equal(batch_shuffle(e, [0, 1, 2]), e)
    assert torch.equal(batch_shuffle(e[:1], [0]), e[:1])
    with pytest.raises(ValueError):
        batch_shuffle(e, [0, 0, 1])
    with pytest.raises(ValueError):
        batch_shuffle(e, [0, 1])


def test_sample_gamma():
    rng = np.random.default_rng(0)
    g = sample_gamma(rng, 100_000)
    assert abs(g.mean() - 0.5) < 0.01 and abs(g.var() - 0.05) < 0.005
    assert np.all((g > 0) & (g < 1))
    assert np.array_equal(sample_gamma(np.random.default_rng(3), 10), sample_gamma(np.random.default_rng(3), 10))
    assert np.all(sample_gamma(rng, 5, training=False) == 1.0)


def test_dsln_initialization_is_plain_layer_norm():
    layer = DynamicSpeakerLayerNorm(8, 4)
    with torch.no_grad():
        layer.weight_pred.weight.zero_()
        layer.bias_pred.weight.zero_()
    h = torch.randn(1, 5, 8)
    assert torch.allclose(layer(h, torch.randn(1, 4)), F.layer_norm(h, (8,)), atol=1e-6)


# -- conformer and predictors ------------------------------------------------

@pytest.mark.parametrize("norm", ["ln", "dsln", "mdsln"])
@pytest.mark.parametrize("n", [1, 4, 13])
def test_conformer_shape(norm, n):
    from dtts.model import SpeakerCondition

    block = ConformerBlock(16, ff_mult=2, final_norm=norm, speaker_dim=16).eval()
    cond = SpeakerCondition(torch.randn(2, 16), torch.randn(2, 16), torch.rand(2))
    assert block(torch.randn(2, n, 16), None, cond).shape == (2, n, 16)


def test_conformer_requires_speaker_for_speaker_norm():
    with pytest.raises(ValueError):
        ConformerBlock(16, final_norm="dsln", speaker_dim=16)(torch.randn(1, 3, 16))
    with pytest.raises(ValueError):
        ConformerBlock(16, final_norm="batch")


def test_attention_rows_and_padding():
    attn = SelfAttention(8)
    mask = torch.tensor([[True, True, True, False, False]])
    w = attn.weights(torch.randn(1, 5, 8), mask)
    assert torch.allclose(w.sum(-1), torch.ones(1, 5), atol=1e-6)
    assert torch.all(w[..., 3:] == 0)


def test_conformer_padding_does_not_leak():
    torch.manual_seed(1)
    block = ConformerBlock(16, ff_mult=2, dropout=0.0).to(D64).eval()
    x = torch.randn(1, 6, 16, dtype=D64)
    padded = torch.cat([x, torch.randn(1, 3, 16, dtype=D64) * 100], dim=1)
    mask = torch.arange(9)[None] < 6
    a = block(x, torch.ones(1, 6, dtype=torch.bool))
    b = block(padded, mask)
    assert torch.allclose(a, b[:, :6], atol=1e-12)
    assert torch.all(b[:, 6:] == 0)


def test_variance_predictor_eval_deterministic_and_zero_head():
    vp = VariancePredictor(16, 16, dropout=0.5).eval()
    x = torch.randn(2, 7, 16)
    assert torch.equal(vp(x), vp(x))
    with torch.no_grad():
        vp.head.weight.zero_()
        vp.head.bias.zero_()
    assert torch.all(vp(x) == 0)


def test_convglu_gate_half():
    glu = ConvGLU(4, kernel_size=3)
    with torch.no_grad():
        glu.conv.weight[4:].zero_()
        glu.conv.bias[4:].zero_()
    x = torch.randn(1, 6, 4)
    lin = F.conv1d(x.transpose(1, 2), glu.conv.weight[:4], glu.conv.bias[:4], padding=1).transpose(1, 2)
    assert torch.allclose(glu(x), 0.5 * lin, atol=1e-6)


def test_linguistic_encoder_and_text_predictor_shapes():
    enc = LinguisticEncoder(32, 16).eval()
    ssl = torch.randn(2, 11, 32)
    z = enc(ssl)
    assert z.shape == (2, 11, 16)
    assert torch.equal(z, enc(ssl.clone()))
    tp = TextPredictor(7, 16, 1, ff_mult=2).eval()
    logits = tp(z)
    assert logits.shape == (2, 11, 7) and torch.isfinite(logits).all()


# -- length regulator --------------------------------------------------------

def test_length_regulate_examples():
    h = torch.randn(4, 3)
    out, mask = length_regulate(h, [1, 1, 1, 1])
    assert torch.equal(out, h) and mask.all()
    out, _ = length_regulate(h[:1], [3])
    assert torch.equal(out, h[:1].repeat(3, 1))
    with pytest.raises(ValueError):
        length_regulate(h, [1, 1, 1, 1], n_frames=5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=6))
def test_length_regulate_matches_repeat_oracle(durs):
    h = torch.arange(len(durs) * 2, dtype=torch.float32).reshape(len(durs), 2)
    out, _ = length_regulate(h, durs)
    rows = [h[i].tolist() for i, d in enumerate(durs) for _ in range(d)]
    assert out.tolist() == rows


# -- full model ----------------------------------------------------------------

def make_model(cfg, seed=0):
    torch.manual_seed(seed)
    return CrossLingualTTS(cfg).eval()


def test_embed_text(tiny_config):
    model = make_model(tiny_config)
    tokens = torch.tensor([[1, 2, 3]])
    h0, _, _ = model.embed_text(tokens, torch.tensor([0]), torch.tensor([0]))
    h1, _, _ = model.embed_text(tokens, torch.tensor([1]), torch.tensor([0]))
    assert not torch.allclose(h0, h1)
    with pytest.raises(IndexError, match="speaker id 7"):
        model.embed_text(tokens, torch.tensor([0]), torch.tensor([7]))
    with torch.no_grad():
        model.language_embed.weight.zero_()
    h, _, _ = model.embed_text(tokens, torch.tensor([1]), torch.tensor([0]))
    assert torch.equal(h, model.token_embed(tokens))


def test_synthesize_shapes_and_decomposition(tiny_config):
    model = make_model(tiny_config)
    out = model.synthesize([1, 2, 3, 4], 0, 1, durations=[2, 1, 3, 2])
    assert out["mel"].shape == (8, 80)
    assert torch.equal(out["mel"], out["mel_ld"] + out["mel_sd"])
    free = model.synthesize([1, 2, 3], 0, 1)
    assert free["mel"].shape[0] == int(free["durations"].sum())
    assert torch.all(free["durations"] >= 1)
    with pytest.raises(ValueError):
        model.synthesize([], 0, 0)


def test_zero_sd_projection_leaves_ld_only(tiny_config):
    model = make_model(tiny_config)
    with torch.no_grad():
        model.proj_sd.weight.zero_()
        model.proj_sd.bias.zero_()
    out = model.synthesize([1, 2], 1, 0, durations=[3, 3])
    assert torch.equal(out["mel"], out["mel_ld"])


def test_ldv_teacher_forcing_and_threshold(tiny_config):
    model = make_model(tiny_config)
    h = torch.randn(1, 3, tiny_config.dim)
    mask = torch.ones(1, 3, dtype=torch.bool)
    target = torch.tensor([[0.0, 1.0, 0.0]])
    out, *_ = model.ldv(h, mask, target, torch.zeros(1, 3))
    conv = model.ldv.pitch_embed(target.unsqueeze(-1), mask) + model.ldv.energy_embed(torch.zeros(1, 3, 1), mask)
    assert torch.allclose(out - h, conv, atol=1e-6)
    with torch.no_grad():
        for head in (model.ldv.pitch.head, model.ldv.energy.head):
            head.weight.zero_()
            head.bias.fill_(-10.0)
    _, _, _, _, pbin, ebin = model.ldv(h, mask)
    assert torch.all(pbin == 0) and torch.all(ebin == 0)


def test_linguistic_adaptor_additivity(tiny_config):
    model = make_model(tiny_config)
    h = torch.randn(1, 5, tiny_config.dim)
    mask = torch.ones(1, 5, dtype=torch.bool)
    target = torch.randn(1, 5, tiny_config.dim)
    out, _ = model.linguistic_adaptor(h, mask, target)
    assert torch.allclose(out - h, model.linguistic_adaptor.embed(target, mask), atol=1e-6)
    with torch.no_grad():
        model.linguistic_adaptor.predictor.head.weight.zero_()
        model.linguistic_adaptor.predictor.head.bias.zero_()
    out, pred = model.linguistic_adaptor(h, mask)
    assert torch.all(pred == 0)
    assert torch.allclose(out, h + model.linguistic_adaptor.embed(torch.zeros_like(h), mask))


def test_zeroed_variance_embedding_leaves_backbone(tiny_config):
    model = make_model(tiny_config)
    tokens = torch.tensor([[1, 2, 3]])
    mask = torch.ones_like(tokens, dtype=torch.bool)
    args = (tokens, mask, torch.tensor([0]), torch.tensor([1]), torch.tensor([[2, 2, 2]]))
    with torch.no_grad():
        for conv in (model.ldv.pitch_embed, model.ldv.energy_embed):
            conv.weight.zero_()
            conv.bias.zero_()
    a = model(*args, ldp_target=torch.tensor([[0.0, 1.0, 1.0]]))
    b = model(*args, ldp_target=torch.tensor([[1.0, 0.0, 0.0]]))
    assert torch.equal(a["mel"], b["mel"])


def test_speaker_changes_sd_stream(tiny_config):
    model = make_model(tiny_config)
    a = model.synthesize([1, 2, 3], 0, 0, durations=[2, 2, 2])
    b = model.synthesize([1, 2, 3], 0, 1, durations=[2, 2, 2])
    assert a["h_sd"].shape == (6, tiny_config.dim)
    assert not torch.allclose(a["h_sd"], b["h_sd"])


def test_batch_padding_invariance(tiny_config):
    model = make_model(tiny_config).to(D64)
    tokens = torch.tensor([[1, 2, 3, 4], [5, 6, 0, 0]])
    mask = tokens > 0
    durs = torch.tensor([[1, 2, 1, 2], [3, 2, 0, 0]])
    out = model(tokens, mask, torch.tensor([0, 1]), torch.tensor([1, 2]), durs)
    single = model(tokens[1:, :2], mask[1:, :2], torch.tensor([1]), torch.tensor([2]), durs[1:, :2])
    assert torch.allclose(out["mel"][1, :5], single["mel"][0], atol=1e-10)
    assert torch.all(out["mel"][1, 5:] == 0)
