import math

import numpy as np
import pytest
import torch

from crystalscreen import jepa
from crystalscreen.errors import DegenerateEmbedding
from crystalscreen.tensor_nn import DTYPE

from conftest import crystals_from_seed

TINY = jepa.JepaConfig(layers=1, hidden_dim=8, heads=2, embed_dim=4)


def naive_infonce(pred, tgt, energies, tau):
    pred, tgt = np.asarray(pred), np.asarray(tgt)
    b = len(pred)
    total = 0.0
    for i in range(b):
        num = None
        den = 0.0
        for k in range(b):
            s = pred[i] @ tgt[k] / (np.linalg.norm(pred[i]) * np.linalg.norm(tgt[k]))
            w = 1.0 if i == k else 1.0 - math.exp(-abs(energies[i] - energies[k]))
            den += math.exp(w * s / tau)
            if i == k:
                num = math.exp(s / tau)
        total += -math.log(num / den)
    return total / b


def test_energy_weight_cases():
    assert jepa.energy_weight(-1.0, -1.0) == 0.0
    assert jepa.energy_weight(0.0, math.log(2)) == pytest.approx(0.5, abs=1e-15)
    assert jepa.energy_weight(0.0, 5.0, same_index=True) == 1.0
    w = jepa.energy_weight_matrix([0.0, math.log(2), 0.0]).numpy()
    assert np.allclose(np.diag(w), 1) and w[0, 2] == 0 and w[0, 1] == pytest.approx(0.5)


def test_infonce_single_item_is_zero():
    p = torch.randn(1, 4, dtype=DTYPE)
    assert jepa.infonce_loss(p, torch.randn(1, 4, dtype=DTYPE), [0.3]).item() == 0.0


def test_infonce_two_item_hand_value():
    # aligned diagonal (sim = 1, tau = 0.1 gives 10), equal energies so off-diagonal weight is 0
    e = torch.eye(2, dtype=DTYPE)
    loss = jepa.infonce_loss(e, e, [0.5, 0.5], tau=0.1).item()
    assert loss == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + 1)), rel=1e-12)
    assert loss == pytest.approx(4.54e-5, rel=1e-3)


@pytest.mark.parametrize("seed", range(10))
def test_infonce_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    b, d = int(rng.integers(2, 9)), int(rng.integers(2, 7))
    p, t, e = rng.normal(size=(b, d)), rng.normal(size=(b, d)), rng.normal(size=b)
    tau = float(rng.uniform(0.05, 1.0))
    got = jepa.infonce_loss(torch.tensor(p), torch.tensor(t), e, tau).item()
    assert abs(got - naive_infonce(p, t, e, tau)) < 1e-12


def test_infonce_scale_invariant_and_nonnegative():
    rng = np.random.default_rng(3)
    p, t, e = torch.tensor(rng.normal(size=(6, 4))), torch.tensor(rng.normal(size=(6, 4))), rng.normal(size=6)
    a = jepa.infonce_loss(p, t, e).item()
    assert a >= 0
    assert jepa.infonce_loss(3.7 * p, 0.2 * t, e).item() == pytest.approx(a, abs=1e-12)


def test_infonce_errors():
    with pytest.raises(DegenerateEmbedding):
        jepa.infonce_loss(torch.zeros(2, 3, dtype=DTYPE), torch.ones(2, 3, dtype=DTYPE), [0, 1])
    with pytest.raises(ValueError):
        jepa.infonce_loss(torch.ones(2, 3, dtype=DTYPE), torch.ones(2, 3, dtype=DTYPE), [0, 1], tau=0)


def test_predictor_reductions():
    m = jepa.init_model(TINY, seed=0)
    p = {k: torch.zeros_like(v) for k, v in m.params.items()}
    p["pred.b2"] = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=DTYPE)
    h = torch.randn(4, dtype=DTYPE)
    cond = torch.rand(6, dtype=DTYPE)
    assert torch.equal(jepa.predict(p, h, cond), p["pred.b2"])
    p["pred.b2"] = torch.zeros(4, dtype=DTYPE)
    p["pred.w2"] = torch.eye(4, dtype=DTYPE)
    assert torch.allclose(jepa.predict(p, h, cond), h * torch.sigmoid(h), atol=1e-15)


def test_predictor_golden():
    m = jepa.init_model(TINY, seed=5)
    g = torch.Generator().manual_seed(11)
    pp = {k: v + 0.5 * torch.randn(v.shape, generator=g, dtype=DTYPE) for k, v in m.params.items() if k.startswith("pred.")}
    h = torch.randn(4, generator=g, dtype=DTYPE)
    cond = torch.rand(6, generator=g, dtype=DTYPE)
    np.testing.assert_allclose(
        jepa.predict(pp, h, cond).numpy(),
        [-0.38153267175015265, -0.5796289457550287, 0.38231682966336067, -0.09464145029002094],
        atol=1e-12,
    )


def test_encode_deterministic_and_permutation_invariant():
    m = jepa.init_model(TINY, seed=1)
    m.params = {k: v + 0.3 * torch.randn(v.shape, generator=torch.Generator().manual_seed(2), dtype=DTYPE) for k, v in m.params.items()}
    c = crystals_from_seed(4, 1)[0]
    a, b = jepa.encode(m, c), jepa.encode(m, c)
    assert np.array_equal(a.embedding, b.embedding)
    perm = np.arange(c.num_atoms)[::-1]
    pc = c.replace(frac_coords=c.frac_coords[perm], species=tuple(np.array(c.species)[perm]))
    assert np.allclose(jepa.encode(m, pc).embedding, a.embedding, atol=1e-12)
    sp = list(c.species)
    sp[0] = 3 if sp[0] != 3 else 4
    assert not np.allclose(jepa.encode(m, c.replace(species=tuple(sp))).embedding, a.embedding)


def test_sigreg_cases():
    t = torch.randn(5, 4, dtype=DTYPE)
    assert jepa.sigreg_mse_loss(t, t, lambda_sig=0).item() == 0.0
    dirs = jepa.random_directions(16, 4, torch.Generator().manual_seed(0))
    same = torch.ones(8, 4, dtype=DTYPE)
    proj_mean = (same @ dirs.T)[0]
    assert jepa.sigreg_penalty(same, dirs).item() == pytest.approx((proj_mean**2 + 1).mean().item())
    assert jepa.sigreg_penalty(same, dirs).item() >= 1.0
    big = torch.randn(20_000, 4, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
    assert jepa.sigreg_penalty(big, dirs).item() < 1e-3


def test_jepa_loss_gradient_check():
    from crystalscreen.tensor_nn import finite_difference_check

    m = jepa.init_model(TINY, seed=3)
    rng = np.random.default_rng(0)
    crystals = [c.replace(e_form_per_atom=e) for c, e in zip(crystals_from_seed(1, 4), [-0.5, 0.1, -1.2, 0.4])]
    _, ctx, tgt, cond = jepa.sample_batch(crystals, rng, 4)
    energies = np.array([c.e_form_per_atom for c in tgt])
    errs = finite_difference_check(lambda p: jepa._loss_on_batch(m, p, ctx, tgt, cond, energies, 0), m.params, max_entries=4)
    assert max(errs.values()) < 1e-4


@pytest.fixture
def small_corpus(bench):
    return bench.jepa_corpus[:64]


def test_training_descends_and_is_deterministic(small_corpus):
    corpus = small_corpus
    cfg = jepa.JepaConfig(layers=1, hidden_dim=16, heads=2, embed_dim=8, steps=200, batch_size=16, lr=1e-3, seed=0)
    m0 = jepa.init_model(cfg)
    before = jepa.evaluate_loss(m0, corpus)
    m, state, curve = jepa.train_jepa(corpus, cfg)
    assert jepa.evaluate_loss(m, corpus) < before
    _, _, curve2 = jepa.train_jepa(corpus, cfg)
    assert curve == curve2 and state.step == 200


def test_sigreg_objective_trains(tmp_path, small_corpus):
    corpus = small_corpus[:16]
    cfg = jepa.JepaConfig(layers=1, hidden_dim=8, heads=2, embed_dim=4, steps=5, batch_size=8, objective="sigreg")
    m, state, curve = jepa.train_jepa(corpus, cfg)
    assert len(curve) == 5 and all(np.isfinite(curve))
    jepa.save_model(tmp_path / "j.ckpt", m, state)
    m2, s2 = jepa.load_model(tmp_path / "j.ckpt")
    assert m2.config == m.config and s2.step == 5
    assert all(torch.equal(m2.params[k], m.params[k]) for k in m.params)


def test_training_requires_labels():
    cs = crystals_from_seed(0, 3)
    with pytest.raises(ValueError):
        jepa.train_jepa(cs, TINY)
