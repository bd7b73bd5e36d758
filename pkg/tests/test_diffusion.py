import numpy as np
import pytest
import torch

from affordmotion import diffusion as dfn


def test_schedule_lengths_and_single_step():
    assert dfn.make_schedule(500).T == 500
    assert dfn.make_schedule(1000).T == 1000
    s = dfn.make_schedule(1)
    np.testing.assert_allclose(s.alpha_bars, [1 - 1e-4])


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [500, 1000])
def test_schedule_invariants(kind, T):
    s = dfn.make_schedule(T, kind)
    assert ((s.betas > 0) & (s.betas < 1)).all()
    assert (np.diff(s.alpha_bars) < 0).all()
    assert s.alpha_bars[-1] < 0.01
    assert s.betas.max() <= 0.999


def test_schedule_errors():
    with pytest.raises(ValueError):
        dfn.make_schedule(0)
    with pytest.raises(ValueError):
        dfn.make_schedule(10, "quadratic")
    with pytest.raises(ValueError):
        dfn.DiffusionSchedule(np.array([0.5, 1.0]))


def test_schedule_config_roundtrip():
    s = dfn.make_schedule(37, "cosine", posterior_variance_kind="beta")
    r = dfn.schedule_from_config(s.to_config())
    np.testing.assert_array_equal(s.betas, r.betas)
    np.testing.assert_array_equal(r.posterior_variance, s.betas)


def schedule_with_alpha_bar(value):
    # one-step schedule whose only alpha_bar equals value
    return dfn.DiffusionSchedule(np.array([1 - value]))


def test_forward_closed_form():
    s = schedule_with_alpha_bar(0.25)
    x0, noise = torch.randn(4, 3), torch.randn(4, 3)
    xt = dfn.forward_sample(x0, 0, noise, s)
    torch.testing.assert_close(xt, 0.5 * x0 + np.sqrt(0.75) * noise)


def test_forward_near_identity_at_t0():
    s = dfn.make_schedule(100)
    x0 = torch.randn(8, 5, dtype=torch.float64)
    xt = dfn.forward_sample(x0, 0, torch.randn_like(x0), s)
    assert (xt - x0).abs().max() < 0.1


def test_forward_shape_and_range_errors():
    s = dfn.make_schedule(10)
    with pytest.raises(ValueError):
        dfn.forward_sample(torch.zeros(2, 3), 0, torch.zeros(2, 4), s)
    with pytest.raises(ValueError):
        dfn.forward_sample(torch.zeros(2, 3), 10, torch.zeros(2, 3), s)


@pytest.mark.parametrize("t", [0, 100, 499])
def test_forward_monte_carlo_moments(t):
    s = dfn.make_schedule(500)
    g = torch.Generator().manual_seed(t)
    x0 = torch.zeros(100_000, 1, dtype=torch.float64)
    xt = dfn.forward_sample(x0, t, torch.randn(x0.shape, generator=g, dtype=torch.float64), s)
    std = np.sqrt(1 - s.alpha_bars[t])
    assert abs(xt.mean().item()) < 0.02 * max(std, 1.0)
    assert abs(xt.std().item() / std - 1) < 0.02


def test_reverse_t0_is_posterior_mean():
    s = dfn.make_schedule(50)
    xt, x0 = torch.randn(3, 4), torch.randn(3, 4)
    mean, _ = dfn.posterior(xt, 0, x0, s)
    a = dfn.reverse_step(xt, 0, x0, s, torch.Generator().manual_seed(0))
    b = dfn.reverse_step(xt, 0, x0, s, torch.Generator().manual_seed(1))
    torch.testing.assert_close(a, mean)
    torch.testing.assert_close(a, b)
    # with the true clean sample the mean at t=0 is the clean sample itself
    torch.testing.assert_close(mean, x0)


def test_reverse_small_beta_follows_forward_trajectory():
    s = dfn.DiffusionSchedule(np.full(20, 1e-6))
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(64, 3, dtype=torch.float64, generator=g)
    t = 10
    xt = dfn.forward_sample(x0, t, torch.randn(x0.shape, generator=g, dtype=torch.float64), s)
    prev = dfn.reverse_step(xt, t, x0, s, g)
    assert (prev - x0).abs().max() < 0.02


def test_reverse_monte_carlo_variance():
    s = dfn.make_schedule(200)
    t = 120
    xt = torch.full((10_000, 1), 0.3, dtype=torch.float64)
    x0 = torch.full_like(xt, -0.7)
    draws = dfn.reverse_step(xt, t, x0, s, torch.Generator().manual_seed(3))
    mean, var = dfn.posterior(xt, t, x0, s)
    assert abs(draws.var().item() / var[0].item() - 1) < 0.05
    assert abs(draws.mean().item() - mean[0, 0].item()) < 4 * np.sqrt(var[0].item() / 10_000)


def test_reverse_rejects_nonfinite():
    s = dfn.make_schedule(5)
    with pytest.raises(dfn.DenoiserDiverged, match="denoiser diverged"):
        dfn.reverse_step(torch.zeros(1, 2), 1, torch.tensor([[np.nan, 0.0]]), s)


def test_posterior_variance_forms():
    s = dfn.make_schedule(100)
    assert s.posterior_variance[0] == 0.0
    np.testing.assert_array_less(s.posterior_variance[1:], s.betas[1:])


def test_training_loss_oracle_and_zero():
    s = dfn.make_schedule(100)
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(4096, 3, generator=g, dtype=torch.float64)
    cheat = lambda xt, t, cond: cond
    assert dfn.training_loss(cheat, x0, x0, s, g).item() == 0.0
    zero = lambda xt, t, cond: torch.zeros_like(xt)
    loss = dfn.training_loss(zero, x0, None, s, g).item()
    assert abs(loss - 1.0) < 0.05


def test_training_loss_nonnegative_and_masked():
    s = dfn.make_schedule(10)
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(5, 4, 2)
    den = lambda xt, t, c: xt * 0.5
    assert dfn.training_loss(den, x0, None, s, g).item() >= 0
    mask = torch.zeros(5, 4, dtype=torch.bool)
    mask[:, :2] = True
    t, noise = torch.randint(0, 10, (5,)), torch.randn(5, 4, 2)
    full = dfn.training_loss(den, x0, None, s, t=t, noise=noise, mask=mask)
    xt = dfn.forward_sample(x0, t, noise, s)
    ref = ((den(xt, t, None) - x0) ** 2)[:, :2].mean()
    torch.testing.assert_close(full, ref)
    with pytest.raises(ValueError):
        dfn.training_loss(den, x0 * np.nan, None, s, g)


def test_sample_loop_constant_denoiser():
    s = dfn.make_schedule(200)
    c = 0.7
    out = dfn.sample_loop(lambda x, t, cond: torch.full_like(x, c), None, (2000, 2), s,
                          torch.Generator().manual_seed(0), dtype=torch.float64)
    assert out.shape == (2000, 2)
    # the final step is deterministic, so every sample lands on c
    assert (out - c).abs().max() < 1e-9


def test_sample_loop_deterministic_and_shape():
    s = dfn.make_schedule(30)
    den = lambda x, t, cond: 0.5 * x
    a = dfn.sample_loop(den, None, (3, 4, 5), s, torch.Generator().manual_seed(4))
    b = dfn.sample_loop(den, None, (3, 4, 5), s, torch.Generator().manual_seed(4))
    assert a.shape == (3, 4, 5)
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    traj_out, traj = dfn.sample_loop(den, None, (2, 2), s, torch.Generator().manual_seed(0), return_trajectory=True)
    assert len(traj) == 30


def test_sample_loop_shape_violation():
    s = dfn.make_schedule(3)
    with pytest.raises(ValueError):
        dfn.sample_loop(lambda x, t, c: x[:, :1], None, (2, 3), s)


def test_sample_loop_propagates_divergence():
    s = dfn.make_schedule(3)
    with pytest.raises(dfn.DenoiserDiverged):
        dfn.sample_loop(lambda x, t, c: x * np.inf, None, (2, 3), s)


def test_timestep_embedding():
    e = dfn.timestep_embedding(torch.tensor([0, 5, 499]), 7)
    assert e.shape == (3, 7) and torch.isfinite(e).all()
    assert not torch.allclose(e[0], e[2])


def test_training_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(3, 8), torch.nn.Tanh(), torch.nn.Linear(8, 2)).double()
    s = dfn.make_schedule(50)
    x0 = torch.randn(16, 2, dtype=torch.float64)
    t = torch.randint(0, 50, (16,))
    noise = torch.randn_like(x0)
    den = lambda xt, tt, c: net(torch.cat([xt, tt[:, None].double() / 50], 1))
    loss = dfn.training_loss(den, x0, None, s, t=t, noise=noise)
    grads = torch.autograd.grad(loss, list(net.parameters()))
    flat = torch.cat([p.reshape(-1) for p in net.parameters()])
    gflat = torch.cat([g.reshape(-1) for g in grads])
    pick = torch.randperm(len(flat), generator=torch.Generator().manual_seed(1))[:32]
    eps = 1e-6
    for i in pick:
        params = list(net.parameters())
        sizes = np.cumsum([0] + [p.numel() for p in params])
        k = int(np.searchsorted(sizes, int(i), side="right") - 1)
        p, j = params[k], int(i) - sizes[k]
        with torch.no_grad():
            p.view(-1)[j] += eps
            up = dfn.training_loss(den, x0, None, s, t=t, noise=noise).item()
            p.view(-1)[j] -= 2 * eps
            down = dfn.training_loss(den, x0, None, s, t=t, noise=noise).item()
            p.view(-1)[j] += eps
        fd = (up - down) / (2 * eps)
        assert abs(fd - gflat[i].item()) <= 1e-3 * max(abs(fd), abs(gflat[i].item()), 1e-8)
