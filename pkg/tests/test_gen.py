import math

import numpy as np
import pytest
import torch

from depflow import gen as G
from depflow import world as W
from oracles import finite_diff_check, rel_close

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def tiny_config(**kw):
    base = dict(enc_channels=16, channels=16, spk_dim=8, cond_dim=6, film_hidden=8, attn_heads=2, film_dropout=0.0)
    base.update(kw)
    return G.GenConfig(**base)


@pytest.fixture(scope="module")
def corpus():
    _, utts = W.generate_world(W.WorldConfig(n_subjects=3, utterances_per_subject=3, tokens_per_utterance=(3, 5)))
    return utts


def tiny_model(utts, dtype=torch.float64, film=False, seed=0):
    torch.manual_seed(seed)
    m = G.DepFlowModel(tiny_config())
    m.register_speakers(G.speaker_signatures(utts))
    if film:
        m.enable_film()
    return m.to(dtype).eval()


def cond(utts, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(len(utts), dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


# ---- FiLM -------------------------------------------------------------------

def test_film_identity():
    h = torch.randn(2, 3, 5)
    assert torch.equal(G.film_modulate(h, torch.ones(2, 3), torch.zeros(2, 3)), h)


def test_film_arithmetic():
    out = G.film_modulate(torch.tensor([[0.5]]), torch.tensor([2.0]), torch.tensor([1.0]))
    assert out.tolist() == [[2.0]]


def test_film_shape_mismatch():
    with pytest.raises(ValueError):
        G.film_modulate(torch.zeros(1, 3, 4), torch.ones(1, 2), torch.zeros(1, 2))


def test_film_generator_identity_at_init():
    gen = G.FiLMGenerator(6, 16, 5, 8, 0.2).eval()
    p = gen(torch.randn(3, 6))
    assert len(p) == 5
    for g, b in zip(p.gammas, p.betas):
        assert torch.equal(g, torch.ones_like(g)) and torch.equal(b, torch.zeros_like(b))
    with pytest.raises(ValueError):
        gen(torch.randn(3, 5))


def test_film_generator_deterministic_in_eval():
    gen = G.FiLMGenerator(6, 16, 5, 8, 0.2)
    torch.nn.init.normal_(gen.net[-1].weight)
    gen.eval()
    c = torch.randn(1, 6)
    a, b = gen(c), gen(c)
    assert all(torch.equal(x, y) for x, y in zip(a.gammas, b.gammas))


def test_film_init_decoder_matches_unconditioned(corpus):
    m = tiny_model(corpus, film=True)
    batch = G.make_batch(corpus[:3], cond(corpus[:3]), dtype=torch.float64)
    spk = m.speaker_embedding(batch.speakers)
    _, mu_tok = m.encoder(batch.tokens, batch.tok_mask, spk)
    mu = G.expand(mu_tok, batch.token_index, batch.mask)
    t = torch.full((3,), 0.3, dtype=torch.float64)
    x = torch.randn(batch.y.shape, dtype=torch.float64)
    a = m.decoder(x, mu, batch.pos, batch.mask, t, spk, m.film_params(batch.c_dep))
    b = m.decoder(x, mu, batch.pos, batch.mask, t, spk, None)
    assert (a - b).abs().max().item() <= 1e-6


# ---- flow path ------------------------------------------------------------------

def test_flow_velocity_example():
    _, u = G.flow_path_sample(torch.tensor([1.0, 1.0]), torch.tensor([0.5, 0.5]), 0.3, sigma_min=0.0)
    assert u.tolist() == [0.5, 0.5]


def test_flow_endpoints():
    x1, z = torch.randn(4, 3, dtype=torch.float64), torch.randn(4, 3, dtype=torch.float64)
    x0, _ = G.flow_path_sample(x1, z, 0.0)
    assert torch.equal(x0, z)
    xe, _ = G.flow_path_sample(x1, z, 1.0)
    assert torch.allclose(xe, x1 + 1e-4 * z, atol=1e-12)


def test_flow_constant_velocity():
    x1, z = torch.randn(5, 7, dtype=torch.float64), torch.randn(5, 7, dtype=torch.float64)
    for t in np.linspace(0, 0.99, 12):
        a, u = G.flow_path_sample(x1, z, float(t))
        b, _ = G.flow_path_sample(x1, z, float(t) + 1e-3)
        assert ((b - a) / 1e-3 - u).abs().max().item() <= 1e-6


def test_flow_per_item_times():
    x1, z = torch.randn(3, 4, 2), torch.randn(3, 4, 2)
    t = torch.tensor([0.0, 0.5, 1.0])
    xt, _ = G.flow_path_sample(x1, z, t)
    assert torch.equal(xt[0], z[0])


# ---- losses ----------------------------------------------------------------------

def test_fm_loss_cases():
    u = torch.randn(2, 8, 3)
    mask = torch.ones(2, 8, dtype=torch.bool)
    assert G.fm_loss_from(u, u, mask).item() == 0.0
    assert G.fm_loss_from(u + 1, u, mask).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        G.fm_loss_from(u, u, torch.zeros(2, 8, dtype=torch.bool))


def test_prior_loss_cases():
    y = torch.randn(2, 6, 4, dtype=torch.float64)
    mask = torch.ones(2, 6, dtype=torch.bool)
    assert G.prior_loss(y, y, mask).item() == pytest.approx(HALF_LOG_2PI, abs=1e-12)
    assert G.prior_loss(y, y - 1, mask).item() == pytest.approx(0.5 * (1 + math.log(2 * math.pi)))
    half = mask.clone()
    half[:, 3:] = False
    assert G.prior_loss(y, y - 1, half).item() == pytest.approx(G.prior_loss(y, y - 1, mask).item())
    with pytest.raises(ValueError):
        G.prior_loss(y, y, torch.zeros_like(mask))


def test_duration_loss_cases():
    assert G.duration_loss(torch.tensor([3.0]), torch.tensor([3.0])).item() == 0.0
    assert G.duration_loss(torch.tensor([2.0]), torch.tensor([2 * math.e])).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        G.duration_loss(torch.tensor([0.0]), torch.tensor([1.0]))


def _fixed_noise(batch, seed=1):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(batch.y.shape[0], generator=g, dtype=torch.float64),
            torch.randn(batch.y.shape, generator=g, dtype=torch.float64))


@pytest.mark.parametrize("part,prefix", [("dur", "duration"), ("prior", "encoder"), ("fm", "decoder")])
def test_loss_gradients(corpus, part, prefix):
    m = tiny_model(corpus, film=True, seed=2)
    for p in m.film.parameters():  # move away from the zero init so FiLM paths carry gradient
        torch.nn.init.normal_(p, std=0.1)
    batch = G.make_batch(corpus[:4], cond(corpus[:4]), dtype=torch.float64)
    t, z = _fixed_noise(batch)
    m.zero_grad()
    G.compute_losses(m, batch, t=t, z=z)[1][part].backward()
    params = [p for n, p in m.named_parameters() if n.startswith(prefix) and p.grad is not None]
    pairs = finite_diff_check(lambda: G.compute_losses(m, batch, t=t, z=z)[1][part], params, n_coords=10)
    assert all(rel_close(a, n) for a, n in pairs), pairs


def test_total_loss_gradient_film(corpus):
    m = tiny_model(corpus, film=True, seed=3)
    for p in m.film.parameters():
        torch.nn.init.normal_(p, std=0.1)
    batch = G.make_batch(corpus[:4], cond(corpus[:4]), dtype=torch.float64)
    t, z = _fixed_noise(batch)
    m.zero_grad()
    G.compute_losses(m, batch, t=t, z=z)[0].backward()
    params = list(m.film.parameters())
    pairs = finite_diff_check(lambda: G.compute_losses(m, batch, t=t, z=z)[0], params, n_coords=10)
    assert all(rel_close(a, n) for a, n in pairs), pairs


def test_total_loss_composition(corpus):
    m = tiny_model(corpus)
    batch = G.make_batch(corpus[:3], dtype=torch.float64)
    t, z = _fixed_noise(batch)
    total, p = G.compute_losses(m, batch, t=t, z=z, lambda_p=0.0)
    assert total.item() == pytest.approx((p["dur"] + p["fm"]).item(), rel=1e-12)
    total, p = G.compute_losses(m, batch, t=t, z=z)
    assert total.item() == pytest.approx((p["dur"] + p["prior"] + p["fm"]).item(), rel=1e-12)
    assert min(p[k].item() for k in ("dur", "prior", "fm")) >= 0


# ---- sampling ------------------------------------------------------------------------

def test_sample_deterministic(corpus):
    m = tiny_model(corpus, dtype=torch.float32)
    u = corpus[0]
    a = G.sample(m, u.content, u.speaker_id, seed=7)
    b = G.sample(m, u.content, u.speaker_id, seed=7)
    assert np.array_equal(a, b)
    assert a.shape[1] == 16 and np.isfinite(a).all()


def test_sample_independent_of_batch(corpus):
    m = tiny_model(corpus, dtype=torch.float32)
    u, v = corpus[0], corpus[4]
    alone = G.sample(m, u.content, u.speaker_id, seed=3)
    both = G.sample_batch(m, [u.content, v.content], [u.speaker_id, v.speaker_id], seeds=[3, 4])
    assert np.allclose(alone, both[0], atol=1e-5)


def test_sample_durations_respected(corpus):
    m = tiny_model(corpus, dtype=torch.float32)
    out = G.sample(m, (0, 1, 2), corpus[0].speaker_id, durations=(2, 3, 4))
    assert out.shape[0] == 9


def test_sample_rejects_unknown(corpus):
    m = tiny_model(corpus, dtype=torch.float32)
    with pytest.raises(ValueError):
        G.sample(m, (0, 99), corpus[0].speaker_id)
    with pytest.raises(ValueError, match="speaker"):
        G.sample(m, (0, 1), 12345)


def test_frame_layout():
    mask, pos, slot = G.frame_layout([[2, 3], [1]])
    assert mask.shape[1] % 4 == 0
    assert mask[0].sum() == 5 and mask[1].sum() == 1
    assert pos[0, :5].tolist() == pytest.approx([0, 0.5, 0, 1 / 3, 2 / 3])
    assert slot[0, :5].tolist() == [0, 0, 1, 1, 1]


def test_stage3_reproduces_stage2(corpus):
    m = tiny_model(corpus, dtype=torch.float32)
    u = corpus[1]
    before = G.sample(m, u.content, u.speaker_id, seed=1)
    m.enable_film()
    m.eval()
    after = G.sample(m, u.content, u.speaker_id, c_dep=np.ones(6) / math.sqrt(6), seed=1)
    assert np.allclose(before, after, atol=1e-6)


def test_checkpoint_roundtrip(corpus, tmp_path):
    m = tiny_model(corpus, dtype=torch.float32, film=True)
    G.save_checkpoint(tmp_path / "g.pt", m, "finetune")
    back, meta = G.load_checkpoint(tmp_path / "g.pt")
    u = corpus[0]
    c = np.ones(6) / math.sqrt(6)
    assert np.array_equal(G.sample(m, u.content, u.speaker_id, c, seed=2),
                          G.sample(back, u.content, u.speaker_id, c, seed=2))
    assert meta["stage"] == "finetune"


def test_short_training_runs(corpus):
    cfg = tiny_config(epochs=2, batch_size=4)
    res = G.pretrain(corpus, cfg)
    assert len(res.history) == 2
    assert all(np.isfinite(h["total"]) for h in res.history)
